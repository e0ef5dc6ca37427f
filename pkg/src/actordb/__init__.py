"""ActorDB: single-node event-sourced database engine.

Per-actor single-writer event storage, incrementally maintained projections
with dynamic materialization, and signed-command security.
"""

__version__ = "0.1.0"
