"""
DEFN OCT toolkit
Defect-injection augmentation, dual-encoder frequency-domain segmentation, composite loss,
evaluation metrics and ETDRS quantification for retinal OCT volumes
"""

from .config import RunConfig, build_run_config, load_run_config, setup_logging
from .errors import ConfigError, DataError, DefnError, NumericError
from .volume_io import DEFAULT_CLASS_MAP, ClassMap, LabeledVolume, load_volume, resample_volume, save_volume

__version__ = '0.1.0'

__all__ = [
    'RunConfig', 'build_run_config', 'load_run_config', 'setup_logging',
    'DefnError', 'ConfigError', 'DataError', 'NumericError',
    'ClassMap', 'DEFAULT_CLASS_MAP', 'LabeledVolume', 'load_volume', 'save_volume', 'resample_volume',
]
