"""Monte Carlo lab for reflected Brownian motion in narrow tubes around metric graphs."""

from narrowtube.graph import (
    Edge,
    Graph,
    GraphPoint,
    GluingParams,
    Regime,
    Vertex,
    load_graph,
    star_graph,
    stickiness_alpha,
    unit_ball_volume,
)
from narrowtube.tube import (
    FilletProfile,
    GeometryError,
    ShellSpec,
    TubeDomain,
    make_fillet,
)

__all__ = [
    "Edge",
    "FilletProfile",
    "GeometryError",
    "Graph",
    "GraphPoint",
    "GluingParams",
    "Regime",
    "ShellSpec",
    "TubeDomain",
    "Vertex",
    "load_graph",
    "make_fillet",
    "star_graph",
    "stickiness_alpha",
    "unit_ball_volume",
]

__version__ = "0.1.0"
