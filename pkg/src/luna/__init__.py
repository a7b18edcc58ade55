"""Linear unified nested attention (Luna) on a small numpy autograd engine."""
from .attention import AttentionParams, AttnMask, PackedState, attend, luna_attend, luna_causal, pack, unpack
from .errors import ConfigError, ContractError, DimensionError, InputError, LunaError
from .model import LunaModel, ModelConfig

__version__ = "0.1.0"
