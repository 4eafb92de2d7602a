"""
Console UI components.
"""

from .prompts import select_checkpoint
from .renderer import UIRenderer
from .theme import Theme, get_available_themes, get_current_theme, set_theme

__all__ = ["Theme", "get_current_theme", "set_theme", "get_available_themes", "UIRenderer", "select_checkpoint"]
