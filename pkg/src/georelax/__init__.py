"""Sound linear relaxations of geometric image transforms and certification of ReLU networks."""
from .errors import GeoRelaxError, InvalidInputError, ResourceError, ShapeError, SingularityError
from .image import Image, bilinear_interpolate, pixel_value, transform_batch, transform_image
from .lipschitz import LipschitzBound, empirical_lipschitz, interp_gradient_bound, residual_lipschitz
from .network import Network, forward, load_network, save_network
from .pipeline import (CertificationConfig, CertificationReport, certify_dataset, certify_image,
                       emit_curve, split_range)
from .soundify import (LinearRelaxation, build_relaxation, check_soundness, choose_subdivisions,
                       correction_1d, correction_multid)
from .transforms import Interval, Kind, ParamBox, TransformSpec, inverse_map
from .unsound import AffineBoundPair, SampleSet, bound_multid, lower_bound_1d, upper_bound_1d
from .verify import BoundResult, ParamLinearForm, crown_backward, ibp_forward, robustness_margin

__version__ = "0.1.0"
