"""
Console renderer for command results: banners, messages and tables.
"""
from typing import Any, Dict, List, Mapping, Optional, Sequence

from rich.align import Align
from rich.console import Console, Group
from rich.markup import escape
from rich.table import Table
from rich.text import Text

from .theme import get_current_theme


class UIRenderer:
    """Central renderer for everything the CLI shows the user."""

    def __init__(self, console: Optional[Console] = None):
        self.console = console or Console()
        self.theme = get_current_theme()
        self.console.push_theme(self.theme.rich_theme)

    def render_banner(self, title: str, subtitle: Optional[str] = None):
        title_text = Text(title, style="panel_title")
        if subtitle:
            title_text.append(f": {subtitle}", style="muted")
        self.console.print(Group(Align.center(title_text), Text("")))

    def render_success_message(self, message: str):
        self.console.print(self.theme.styled(f"✓ {escape(message)}", "success"))

    def render_warning_message(self, message: str):
        self.console.print(self.theme.styled(f"⚠ {escape(message)}", "warning"))

    def render_error_message(self, message: str, details: Sequence[str] = ()):
        self.console.print(self.theme.styled(f"✗ {escape(message)}", "error"))
        for line in details:
            self.console.print(self.theme.styled(f"  - {escape(line)}", "error"))

    def render_info_message(self, message: str):
        self.console.print(self.theme.styled(f"ℹ {escape(message)}", "info"))

    def create_table(self, title: Optional[str] = None, show_header: bool = True) -> Table:
        return Table(
            title=title,
            border_style=self.theme.get_color("border"),
            header_style="table_header",
            show_header=show_header,
        )

    def render_info_table(self, data: Mapping[str, Any], title: Optional[str] = None):
        """Two-column key/value table."""
        table = self.create_table(title=title)
        table.add_column("Property", style="secondary")
        table.add_column("Value", style="text")
        for key, value in data.items():
            table.add_row(key.replace("_", " ").title(), self._format(value))
        self.console.print()
        self.console.print(table)
        self.console.print()

    def render_table_with_data(
        self, data: List[Dict[str, Any]], title: Optional[str] = None, columns: Optional[Sequence[str]] = None
    ):
        if not data:
            self.render_warning_message(f"No {title.lower() if title else 'data'} found.")
            return
        columns = list(columns or data[0].keys())
        table = self.create_table(title=title)
        for col in columns:
            table.add_column(col, style="text")
        for row in data:
            table.add_row(*[self._format(row.get(col, "")) for col in columns])
        self.console.print()
        self.console.print(table)
        self.console.print()

    def render_safety_grid(self, rows: Sequence[Mapping[str, Any]], method: str, variant: str):
        """Collision percentages of one method as a theta1 x theta2 grid."""
        cells = {(int(r["theta1"]), int(r["theta2"])): r for r in rows if r["method"] == method}
        if not cells:
            return
        theta1s = sorted({key[0] for key in cells})
        theta2s = sorted({key[1] for key in cells})
        table = self.create_table(title=f"{method} collisions ({variant})")
        table.add_column("θ1 \\ θ2", style="secondary")
        for t2 in theta2s:
            table.add_column(str(t2), justify="right")
        for t1 in theta1s:
            entries = []
            for t2 in theta2s:
                cell = cells.get((t1, t2))
                if cell is None:
                    entries.append("")
                    continue
                text = self.format_percentage(float(cell["pct"]))
                if int(cell["n_failures"]):
                    text += f" ({cell['n_failures']} failed)"
                entries.append(text)
            table.add_row(str(t1), *entries)
        self.console.print(table)

    def render_check_results(self, results: Sequence[Any]):
        table = self.create_table(title="Property and oracle checks")
        table.add_column("Check", style="secondary")
        table.add_column("Result")
        table.add_column("Detail", style="muted")
        for result in results:
            status = self.theme.styled("pass", "success") if result.passed else self.theme.styled("FAIL", "error")
            table.add_row(result.name, status, result.detail)
        self.console.print()
        self.console.print(table)
        self.console.print()

    def format_percentage(self, value: float) -> str:
        return f"{value:.2f}%"

    def _format(self, value: Any) -> str:
        if isinstance(value, float):
            return f"{value:.6g}"
        if isinstance(value, int) and not isinstance(value, bool):
            return f"{value:,}"
        return str(value)
