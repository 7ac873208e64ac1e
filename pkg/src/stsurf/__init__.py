"""Space-time surface normals for point cloud sequences and a two-stream
classifier built on differentiable feature-space surface fits."""

from .errors import ConfigError, InvalidInput, ParseError, ShapeError, SingularMatrix
from .geometry import CloudSequence, PointFrame, build_st_index, query_st_neighbors
from .stsolver import fit_plane, iterative_normal_refinement, normal_field
from .kinet_unit import KinetConfig, KinetUnit
from .network import BackboneConfig, TrainConfig, TwoStreamModel, evaluate, train_two_stage

__version__ = "0.1.0"
