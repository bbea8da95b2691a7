"""Session-based recommendation with weighted graph attention.

Pipeline: click-stream ingestion -> session/global graph construction ->
cross-session subgraph sampling -> attention encoder with recurrent readout
-> ranking evaluation.  See the ``cli`` module for the command-line entry
point.
"""

__version__ = "0.1.0"
