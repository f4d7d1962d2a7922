import argparse
import os
from pathlib import Path
from typing import Optional

import platformdirs
import yaml
from dotenv import load_dotenv

from xfpkit import XfpError
from xfpkit.quant.autoselect import QualityPolicy
from xfpkit.util.logging import logger, apply_verbosity

class ConfigFileError(XfpError, ValueError): pass

# Recognised keys and their built-in defaults; None means unset
DEFAULTS={
    'XFP_MIN_COS_STRICT': 0.96,
    'XFP_MIN_COS_LAZY': 0.93,
    'XFP_GROUP_SIZE': 128,
    'XFP_LLOYD_ITERS': 20,
    'XFP_MOE_LLOYD_ITERS': 20,
    'XFP_OUTLIER_K': 4.0,
    'XFP_OUTLIER_CAP': 0.02,
    'XFP_LIBRARY_SIZE': 32,
    'XFP_MOE_SAMPLE_SIZE': 4,
    'XFP_MOE_SAMPLE_SEED': None,
    'XFP_LOG_LEVEL': 'INFO',
    'XFP_JOBS': 1,
}
TYPES={'XFP_MIN_COS_STRICT':float,'XFP_MIN_COS_LAZY':float,'XFP_GROUP_SIZE':int,'XFP_LLOYD_ITERS':int,
       'XFP_MOE_LLOYD_ITERS':int,'XFP_OUTLIER_K':float,'XFP_OUTLIER_CAP':float,'XFP_LIBRARY_SIZE':int,
       'XFP_MOE_SAMPLE_SIZE':int,'XFP_MOE_SAMPLE_SEED':int,'XFP_LOG_LEVEL':str,'XFP_JOBS':int}

# argparse dest -> key
FLAG_KEYS={
    'tau_strict':'XFP_MIN_COS_STRICT',
    'tau_lazy':'XFP_MIN_COS_LAZY',
    'group_size':'XFP_GROUP_SIZE',
    'lloyd_iters':'XFP_LLOYD_ITERS',
    'moe_lloyd_iters':'XFP_MOE_LLOYD_ITERS',
    'outlier_k':'XFP_OUTLIER_K',
    'outlier_cap':'XFP_OUTLIER_CAP',
    'library_size':'XFP_LIBRARY_SIZE',
    'moe_sample_size':'XFP_MOE_SAMPLE_SIZE',
    'moe_sample_seed':'XFP_MOE_SAMPLE_SEED',
    'jobs':'XFP_JOBS',
}


def default_config_path() -> Path:
    return platformdirs.user_config_path('xfpkit')/"xfpkit.yaml"

def load_env_file():
    """ Pre-populates the environment from XFP_ENV_FILE, or from .env in the working directory. """
    if (env_file:=os.environ.get('XFP_ENV_FILE',None)) is not None:
        if not Path(env_file).exists():
            raise ConfigFileError(f"XFP_ENV_FILE points to {env_file}, which does not exist")
        load_dotenv(env_file,override=False)
    elif Path('.env').exists():
        load_dotenv('.env',override=False)


class CliConfig():
    """ Merged configuration: flags > environment > config file > built-in defaults. """

    def __init__(self, flags: Optional[dict] = None, config_file=None, environ: Optional[dict] = None):
        if environ is None:
            load_env_file()
            environ=os.environ
        if config_file is None:
            config_file=environ.get('XFP_CONFIG_FILE',None)
            if config_file is None and default_config_path().exists():
                config_file=default_config_path()
        self.config_file=config_file
        self._file=self._read_file(config_file) if config_file is not None else {}
        self._env={k:environ[k] for k in DEFAULTS if environ.get(k,'')!=''}
        self._flags={k:v for k,v in (flags or {}).items() if v is not None}
        if unknown:=[k for k in self._flags if k not in DEFAULTS]:
            raise ConfigFileError(f"Unknown configuration keys {unknown}")

    @staticmethod
    def _read_file(path) -> dict:
        with open(path,'r') as f:
            content=yaml.safe_load(f) or {}
        if not isinstance(content,dict):
            raise ConfigFileError(f"{path} should hold a mapping of XFP_* keys")
        if unknown:=[k for k in content if k not in DEFAULTS]:
            raise ConfigFileError(f"Unknown keys in {path}: {unknown}")
        logger.debug(f"Read configuration from {path}")
        return content

    def source_of(self, key) -> str:
        for name,layer in [('flag',self._flags),('environment',self._env),('file',self._file)]:
            if key in layer: return name
        return 'default'

    def __getitem__(self, key):
        for layer in [self._flags,self._env,self._file]:
            if key in layer:
                value=layer[key]
                if value is None: return None
                try: return TYPES[key](value)
                except (TypeError,ValueError):
                    raise ConfigFileError(f"{key}={value!r} (from {self.source_of(key)}) is not a valid {TYPES[key].__name__}")
        return DEFAULTS[key]

    def as_dict(self) -> dict:
        return {k:self[k] for k in DEFAULTS}

    def policy(self, **overrides) -> QualityPolicy:
        return QualityPolicy(**{
            'tau_strict':self['XFP_MIN_COS_STRICT'],
            'tau_lazy':self['XFP_MIN_COS_LAZY'],
            'k':self['XFP_OUTLIER_K'],
            'cap_fraction':self['XFP_OUTLIER_CAP'],
            'group_size':self['XFP_GROUP_SIZE'],
            'lloyd_iters':self['XFP_LLOYD_ITERS'],
            'moe_lloyd_iters':self['XFP_MOE_LLOYD_ITERS'],
            'moe_sample_size':self['XFP_MOE_SAMPLE_SIZE'],
            'moe_sample_seed':self['XFP_MOE_SAMPLE_SEED'],
            'library_size':self['XFP_LIBRARY_SIZE'],
            **overrides})

    @staticmethod
    def add_arguments(parser: argparse.ArgumentParser, policy: bool = True):
        parser.add_argument('--config',help='YAML file of XFP_* keys (default: XFP_CONFIG_FILE,'\
                                            f' then {default_config_path()})')
        parser.add_argument('-v','--verbose',action='store_true',help='Log at DEBUG level')
        parser.add_argument('-q','--quiet',action='store_true',help='Log warnings and errors only')
        if not policy: return
        group=parser.add_argument_group('quality policy')
        group.add_argument('--tau-strict',type=float,help='Strict cosine floor (XFP_MIN_COS_STRICT, default 0.96)')
        group.add_argument('--tau-lazy',type=float,help='Lazy cosine floor for routed experts (XFP_MIN_COS_LAZY, default 0.93)')
        group.add_argument('--group-size',type=int,help='V2a group size (XFP_GROUP_SIZE, default 128)')
        group.add_argument('--lloyd-iters',type=int,help='Lloyd rounds (XFP_LLOYD_ITERS, default 20)')
        group.add_argument('--moe-lloyd-iters',type=int,help='Lloyd rounds for routed experts (XFP_MOE_LLOYD_ITERS, default 20)')
        group.add_argument('--outlier-k',type=float,help='Outlier threshold in sigmas (XFP_OUTLIER_K, default 4.0)')
        group.add_argument('--outlier-cap',type=float,help='Outlier cap fraction (XFP_OUTLIER_CAP, default 0.02)')
        group.add_argument('--library-size',type=int,help='V2a library size L (XFP_LIBRARY_SIZE, default 32)')
        group.add_argument('--moe-sample-size',type=int,help='Experts sampled per MoE group (XFP_MOE_SAMPLE_SIZE, default 4)')
        group.add_argument('--moe-sample-seed',type=int,help='Seed for random expert sampling (XFP_MOE_SAMPLE_SEED, default first-k)')
        group.add_argument('--jobs',type=int,help='Worker threads for layer-parallel work (XFP_JOBS, default 1)')

    @staticmethod
    def from_namespace(namespace: argparse.Namespace) -> 'CliConfig':
        """ Builds the merged config from parsed arguments and applies the log level. """
        flags={key:getattr(namespace,dest) for dest,key in FLAG_KEYS.items() if hasattr(namespace,dest)}
        conf=CliConfig(flags=flags,config_file=getattr(namespace,'config',None))
        apply_verbosity(getattr(namespace,'verbose',False),getattr(namespace,'quiet',False),
                        default=conf['XFP_LOG_LEVEL'])
        return conf
