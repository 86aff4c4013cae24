"""Multi-granularity acoustic pattern discovery with context-consistency
relabeling, and query-by-example spoken term detection on top of it."""

__version__ = "0.1.0"
