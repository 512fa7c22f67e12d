"""Entity-graph learning engine: offline relation mining plus online targeting."""

__version__ = "0.1.0"
