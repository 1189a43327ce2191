"""modelshim: reference model-serving service for the tamperscope wire
protocol (embedding, promptable segmentation, chat proxy)."""

from .app import create_app
from .config import ShimConfig

__version__ = "0.1.0"

__all__ = ["ShimConfig", "create_app"]
