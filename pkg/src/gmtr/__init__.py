"""Graph matching with a query-patch transformer frontend and a graph-transformer QAP backend."""

__version__ = "0.1.0"
