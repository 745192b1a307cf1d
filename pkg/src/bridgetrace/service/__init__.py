from .app import STATUS, Backend, create_app

__all__ = ["STATUS", "Backend", "create_app"]
