"""
Colour themes for console output.
"""
from typing import Dict, List, Optional

from rich.style import Style
from rich.theme import Theme as RichTheme


class Theme:
    """Semantic colour palette mapped onto a rich Theme."""

    THEMES: Dict[str, Dict[str, str]] = {
        "default": {
            "primary": "#00aaff",
            "secondary": "#00ffff",
            "accent": "#ffff00",
            "success": "#00ff00",
            "warning": "#ffaa00",
            "error": "#ff0000",
            "info": "#00aaff",
            "text": "#ffffff",
            "muted": "#808080",
            "border": "#444444",
        },
        "light": {
            "primary": "#1976d2",
            "secondary": "#7b1fa2",
            "accent": "#00796b",
            "success": "#388e3c",
            "warning": "#f57c00",
            "error": "#d32f2f",
            "info": "#1976d2",
            "text": "#212121",
            "muted": "#757575",
            "border": "#e0e0e0",
        },
        "mono": {
            "primary": "bold",
            "secondary": "default",
            "accent": "bold",
            "success": "default",
            "warning": "default",
            "error": "bold",
            "info": "default",
            "text": "default",
            "muted": "dim",
            "border": "default",
        },
    }

    def __init__(self, theme_name: str = "default"):
        self.theme_name = theme_name if theme_name in self.THEMES else "default"
        self._colors = self.THEMES[self.theme_name]
        self._rich_theme = self._create_rich_theme()

    def _create_rich_theme(self) -> RichTheme:
        styles = {key: Style.parse(color) for key, color in self._colors.items()}
        styles["table_header"] = Style.parse(self._colors["accent"]) + Style(bold=True)
        styles["panel_title"] = Style.parse(self._colors["primary"]) + Style(bold=True)
        return RichTheme(styles)

    def get_color(self, key: str) -> str:
        return self._colors.get(key, self._colors["text"])

    @property
    def rich_theme(self) -> RichTheme:
        return self._rich_theme

    def styled(self, text: str, style_key: str) -> str:
        """Wrap ``text`` in rich markup for a semantic style."""
        return f"[{style_key}]{text}[/{style_key}]"


_current_theme: Optional[Theme] = None


def get_current_theme() -> Theme:
    global _current_theme
    if _current_theme is None:
        _current_theme = Theme()
    return _current_theme


def set_theme(theme_name: str) -> bool:
    global _current_theme
    if theme_name not in Theme.THEMES:
        return False
    _current_theme = Theme(theme_name)
    return True


def get_available_themes() -> List[str]:
    return list(Theme.THEMES)
