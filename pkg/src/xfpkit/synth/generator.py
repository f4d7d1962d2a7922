""" Synthetic weight matrices with a prescribed 3-sigma tail mass and planted outliers.

The stream comes from numpy's Philox counter-based generator keyed by the seed, so a given
(profile, rows, cols, seed) always yields the same matrix. Each element is drawn from a
Gaussian bulk or, with probability p, from a widened Student-t (3 degrees of freedom) component,
both by inverse CDF and truncated at the profile's bound. p is found by bisection so that the
measured fraction beyond 3 sigma matches the profile; planted outliers are then held at their
stated sigma multiples of the final matrix.
"""
import argparse
import dataclasses
import functools
import json
import os
from typing import Optional, Union

import numpy as np
from scipy import stats, optimize

from xfpkit import XfpError
from xfpkit.io.xwt import write_xwt
from xfpkit.quant.tensor import WeightMatrix, MatrixLike, as_array, channel_stats
from xfpkit.util.logging import logger, time_it, apply_verbosity
from xfpkit.util.util import get_resource_path

STUDENT_T_DOF=3
# Width of the t component relative to the unit Gaussian bulk
T_COMPONENT_SCALE=2.5
# Bulk elements never exceed this many sigmas, planted outliers aside
BULK_CLIP_SIGMA=12
TRUNCATION_MARGIN=0.98
TRUNCATION_ROUNDS=6
MAX_TAIL_WEIGHT=0.25
PLANT_ROUNDS=200
TAIL_TOLERANCE=0.2

class ProfileError(XfpError, ValueError): pass
class InfeasibleProfileError(ProfileError): pass


@dataclasses.dataclass(frozen=True)
class DistributionProfile:
    name: str
    tail_fraction_3sigma: float
    max_abs_sigma: float
    planted_outliers: tuple[tuple[float,int],...] = ()
    sigma: float = 1.0
    abs_max: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self,'planted_outliers',tuple((float(m),int(c)) for m,c in self.planted_outliers))
        if not 0<=self.tail_fraction_3sigma<=1:
            raise ProfileError(f"Profile '{self.name}': tail fraction {self.tail_fraction_3sigma} is not in [0,1]")
        if not self.max_abs_sigma>0:
            raise ProfileError(f"Profile '{self.name}': max |w| must be a positive number of sigmas")
        if not self.sigma>0:
            raise ProfileError(f"Profile '{self.name}': sigma must be positive")
        if any(m<=0 or c<0 for m,c in self.planted_outliers):
            raise ProfileError(f"Profile '{self.name}': planted outliers need positive magnitudes and counts")

    @property
    def planted_count(self) -> int:
        return sum(c for _,c in self.planted_outliers)


@functools.cache
def _registry(path: Optional[str] = None) -> tuple[dict,dict]:
    path=path or get_resource_path('xfpkit.synth:profiles.json')
    with open(path) as f:
        raw=json.load(f)
    aliases=raw.pop('_aliases',{})
    raw.pop('_comment',None)
    profiles={name:DistributionProfile(name=name,**fields) for name,fields in raw.items()}
    return profiles,aliases

def list_profiles(path: Optional[str] = None) -> list[str]:
    profiles,aliases=_registry(path)
    return sorted(profiles)+sorted(aliases)

def get_profile(name: str, path: Optional[str] = None) -> DistributionProfile:
    profiles,aliases=_registry(path)
    key=aliases.get(name,name)
    if key not in profiles:
        raise ProfileError(f"Unknown distribution profile '{name}', options are {list_profiles(path)}")
    return profiles[key]


def measure_profile(W: MatrixLike) -> dict:
    """ Fraction of elements beyond 3 sigma and the largest deviation in sigmas. """
    x=as_array(W).astype(np.float64)
    mu,sigma=channel_stats(x)
    dev=np.abs(x-mu)/sigma if sigma>0 else np.zeros_like(x)
    return {'tail_fraction_3sigma':float(np.mean(dev>3)),'max_abs_sigma':float(dev.max()),'mu':mu,'sigma':sigma}

def _tail_fraction(x: np.ndarray) -> float:
    mu,sigma=x.mean(),x.std()
    return float(np.mean(np.abs(x-mu)>3*sigma)) if sigma>0 else 0.0


class _MixtureDraw:
    """ Fixed uniforms for one seed; mixture weight and truncation act on them deterministically. """

    def __init__(self, rng: np.random.Generator, n: int, bound_sigma: float):
        self.u_component=rng.random(n)
        self.u_value=rng.random(n)
        self.u_redraw=rng.random(n)
        self.z_gauss=stats.norm.ppf(self.u_value)
        self.z_t=T_COMPONENT_SCALE*stats.t.ppf(self.u_value,STUDENT_T_DOF)
        self.bound_sigma=bound_sigma

    def _truncated(self, is_t: np.ndarray, u: np.ndarray, b: float) -> np.ndarray:
        out=np.empty(len(u))
        lo,hi=stats.norm.cdf(-b),stats.norm.cdf(b)
        out[~is_t]=stats.norm.ppf(lo+u[~is_t]*(hi-lo))
        bt=b/T_COMPONENT_SCALE
        lo,hi=stats.t.cdf(-bt,STUDENT_T_DOF),stats.t.cdf(bt,STUDENT_T_DOF)
        out[is_t]=T_COMPONENT_SCALE*stats.t.ppf(lo+u[is_t]*(hi-lo),STUDENT_T_DOF)
        return out

    def draw(self, p: float) -> np.ndarray:
        is_t=self.u_component<p
        base=np.where(is_t,self.z_t,self.z_gauss)
        # Truncation bound is in measured sigmas, so iterate it against the sample
        b=self.bound_sigma
        for _ in range(TRUNCATION_ROUNDS):
            x=base.copy()
            out=np.abs(x)>b
            x[out]=self._truncated(is_t[out],self.u_redraw[out],b)
            b=self.bound_sigma*x.std()
        return x

def _plant(x: np.ndarray, positions: np.ndarray, signs: np.ndarray, mags: np.ndarray) -> np.ndarray:
    """ Places mu + sign*m*sigma at each position, sigma and mu measured with the planted values in. """
    if not len(positions): return x
    x=x.copy()
    for _ in range(PLANT_ROUNDS):
        new=x.mean()+signs*mags*x.std()
        if np.array_equal(new,x[positions]): break
        x[positions]=new
    return x


def generate(profile: Union[DistributionProfile,str], rows: int, cols: int, seed: int = 0) -> WeightMatrix:
    """ A rows x cols matrix following ``profile``, deterministic per seed. """
    if isinstance(profile,str): profile=get_profile(profile)
    if rows<1 or cols<1:
        raise ProfileError(f"Matrix dimensions must be positive, got {rows}x{cols}")
    n=rows*cols
    target=profile.tail_fraction_3sigma
    if target>0 and profile.max_abs_sigma<=3:
        raise InfeasibleProfileError(f"Profile '{profile.name}': a {target:.2%} tail beyond 3 sigma"\
                                     f" cannot fit under max |w| = {profile.max_abs_sigma} sigma")
    if any(m>profile.max_abs_sigma for m,_ in profile.planted_outliers):
        raise InfeasibleProfileError(f"Profile '{profile.name}': planted outliers exceed max |w| of {profile.max_abs_sigma} sigma")
    if sum(m*m*c for m,c in profile.planted_outliers)>=n:
        raise InfeasibleProfileError(f"Profile '{profile.name}': planted outliers at these sigmas need more than {n} elements")

    rng=np.random.Generator(np.random.Philox(seed))
    positions=rng.choice(n,size=profile.planted_count,replace=False)
    signs=rng.choice(np.array([-1.0,1.0]),size=profile.planted_count)
    mags=np.repeat([m for m,_ in profile.planted_outliers],[c for _,c in profile.planted_outliers])
    mixture=_MixtureDraw(rng,n,min(profile.max_abs_sigma,BULK_CLIP_SIGMA)*TRUNCATION_MARGIN)
    build=lambda p: _plant(mixture.draw(p),positions,signs,mags)

    with time_it(f"Generating {rows}x{cols} '{profile.name}' (seed {seed})",threshold_time=.5):
        p=0.0
        if target>0 and (_tail_fraction(build(0.0))<target):
            excess=lambda p: _tail_fraction(build(p))-target
            if excess(MAX_TAIL_WEIGHT)<0:
                raise InfeasibleProfileError(f"Profile '{profile.name}': tail fraction {target:.2%} is out of reach"\
                                             f" with bound {profile.max_abs_sigma} sigma")
            p=optimize.bisect(excess,0.0,MAX_TAIL_WEIGHT,xtol=1e-7,maxiter=100)
        x=build(p)
    measured=_tail_fraction(x)
    if target>0 and abs(measured-target)>TAIL_TOLERANCE*target:
        logger.warning(f"Profile '{profile.name}' at {rows}x{cols}: 3-sigma tail {measured:.4%}, target {target:.4%}")
    logger.debug(f"Profile '{profile.name}': t-component weight {p:.5f}, 3-sigma tail {measured:.4%}")
    return WeightMatrix((x-x.mean())*(profile.sigma/x.std()))


def cli_synth(*args):
    parser=argparse.ArgumentParser(description='Writes a synthetic weight matrix as an .xwt file')
    parser.add_argument('profile',help=f'Distribution profile, one of {list_profiles()}')
    parser.add_argument('rows',type=int,help='Output channels')
    parser.add_argument('cols',type=int,help='Input channels')
    parser.add_argument('-o','--output',required=True,help='.xwt file to write')
    parser.add_argument('--seed',type=int,default=0,help='Random stream key (default 0)')
    parser.add_argument('--half',action='store_true',help='Write a binary16 payload')
    parser.add_argument('-v','--verbose',action='store_true',help='Log at DEBUG level')
    namespace=parser.parse_args(args)
    apply_verbosity(verbose=namespace.verbose)

    W=generate(get_profile(namespace.profile),namespace.rows,namespace.cols,seed=namespace.seed)
    write_xwt(W,namespace.output,dtype_tag=1 if namespace.half else 0)
    print(json.dumps({'profile':namespace.profile,'shape':[namespace.rows,namespace.cols],'seed':namespace.seed,
                      'path':os.fspath(namespace.output),**measure_profile(W)}))
