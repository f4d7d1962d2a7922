""" Planning for constrained compression: footprint model, threshold sweep, and the bits-vs-outliers break-even.

A sweep walks (tau_strict, tau_lazy) operating points from aggressive to conservative. At each
point the per-class bit widths come from auto-select on a few representative matrices per class,
the footprint follows from the effective-bit accounting, and the point is classified: 'oom' when
the quantize-time spike exceeds the memory envelope, 'external-garbage' when an externally
supplied verdict says generation degenerates there, 'fits' otherwise.
"""
import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd

from xfpkit import XfpError
from xfpkit.quant.autoselect import LayerClass, Mode, QualityPolicy, AutoSelectReport, score_report, choose_bits,\
    dispatch_tau
from xfpkit.quant.layer import effective_bits_for
from xfpkit.quant.outlier import OUTLIER_TRIPLE_BYTES
from xfpkit.quant.packing import get_scheme, WARP_SIZE
from xfpkit.quant.tensor import MatrixLike, as_array
from xfpkit.synth.generator import ProfileError, generate
from xfpkit.util.conf import CliConfig
from xfpkit.util.logging import logger, time_it
from xfpkit.util.units import parse_bytes, format_gib
from xfpkit.util.util import get_resource_path

SWEEP_SCHEMA_VERSION=1
VERDICTS=('fits','oom','external-garbage')
SMEM_PER_CTA=[
    {'sm':'SM90','tier':'Hopper data-center','hardware':'H100, H200','smem_per_cta_kb':228},
    {'sm':'SM100','tier':'Blackwell data-center','hardware':'B100, B200','smem_per_cta_kb':228},
    {'sm':'SM120','tier':'Blackwell workstation','hardware':'RTX PRO 6000','smem_per_cta_kb':99},
    {'sm':'SM121','tier':'Blackwell SoC','hardware':'DGX Spark (GB10)','smem_per_cta_kb':99},
]

class GridOrderError(XfpError, ValueError): pass
class BreakEvenError(XfpError, ValueError): pass


@dataclasses.dataclass(frozen=True)
class LayerGroup:
    """ All matrices of one layer class: ``layers`` x ``experts`` copies of each shape in ``matrices``. """
    layer_class: LayerClass
    layers: int
    experts: int
    matrices: tuple[tuple[int,int],...]
    synth_profile: str = 'routed_down'
    sample_shape: tuple[int,int] = (64,512)
    samples: int = 4

    def __post_init__(self):
        object.__setattr__(self,'layer_class',LayerClass.parse(self.layer_class))
        object.__setattr__(self,'matrices',tuple((int(r),int(c)) for r,c in self.matrices))
        object.__setattr__(self,'sample_shape',tuple(int(s) for s in self.sample_shape))
        if self.layers<1 or self.experts<1 or self.samples<1 or not len(self.matrices):
            raise ProfileError(f"{self.layer_class.value}: layer, expert and sample counts must be positive"\
                               " and at least one matrix shape given")
        if any(r<1 or c<1 for r,c in self.matrices+(self.sample_shape,)):
            raise ProfileError(f"{self.layer_class.value}: matrix dimensions must be positive")

    @property
    def copies(self) -> int:
        return self.layers*self.experts

    @property
    def numel(self) -> int:
        return self.copies*sum(r*c for r,c in self.matrices)


@dataclasses.dataclass(frozen=True)
class ModelProfile:
    name: str
    groups: tuple[LayerGroup,...]
    bytes_per_device: int
    device_count: int
    reserved_bytes: int = 0
    mode: Mode = Mode.V2

    def __post_init__(self):
        object.__setattr__(self,'mode',Mode.parse(self.mode))
        if self.bytes_per_device<=0 or self.device_count<1 or self.reserved_bytes<0:
            raise ProfileError(f"Profile '{self.name}': device memory and count must be positive")
        if len(classes:=[g.layer_class for g in self.groups])!=len(set(classes)):
            raise ProfileError(f"Profile '{self.name}': each layer class may appear only once")

    @property
    def envelope_bytes(self) -> int:
        return self.bytes_per_device*self.device_count

    @property
    def numel(self) -> int:
        return sum(g.numel for g in self.groups)

    @staticmethod
    def from_dict(d: dict) -> 'ModelProfile':
        try:
            hw=d['hardware']
            groups=tuple(LayerGroup(layer_class=c,**fields) for c,fields in d.get('classes',{}).items())
            return ModelProfile(name=d.get('name','unnamed'),groups=groups,
                                bytes_per_device=parse_bytes(hw['bytes_per_device']),
                                device_count=int(hw.get('device_count',1)),
                                reserved_bytes=sum(parse_bytes(v) for v in d.get('reserved',{}).values()),
                                mode=d.get('mode','v2'))
        except (KeyError,TypeError) as e:
            raise ProfileError(f"Malformed model profile: {e!r}") from e


def _json_or_preset(path_or_name: Union[str,os.PathLike]) -> dict:
    p=Path(path_or_name)
    if not p.exists():
        p=get_resource_path(f"xfpkit.planning:presets/{path_or_name}.json")
        if not p.exists():
            raise ProfileError(f"No file or preset named '{path_or_name}'")
    with open(p) as f:
        return json.load(f)

def load_profile(path_or_name: Union[str,os.PathLike]) -> ModelProfile:
    return ModelProfile.from_dict(_json_or_preset(path_or_name))


@dataclasses.dataclass(frozen=True)
class GridPoint:
    label: str
    tau_strict: float
    tau_lazy: float

def check_grid(grid: Sequence[GridPoint]):
    if not len(grid):
        raise GridOrderError("The sweep grid is empty")
    if bad:=[p.label for p in grid if not p.tau_lazy<=p.tau_strict]:
        raise GridOrderError(f"Grid points {bad} have tau_lazy above tau_strict")

def load_grid(path_or_name: Union[str,os.PathLike] = 'h_grid') -> list[GridPoint]:
    grid=[GridPoint(label=str(p.get('label',i)),tau_strict=float(p['tau_strict']),tau_lazy=float(p['tau_lazy']))
          for i,p in enumerate(_json_or_preset(path_or_name)['points'])]
    check_grid(grid)
    return grid


@dataclasses.dataclass(frozen=True)
class MemoryEstimate:
    steady_bytes: float
    spike_bytes: float
    effective_bits: float

def _as_fractions(assigned) -> dict[int,float]:
    if isinstance(assigned,(int,np.integer)): return {int(assigned):1.0}
    total=sum(assigned.values())
    return {int(n):f/total for n,f in assigned.items() if f>0}

def transient_bytes(rows: int, cols: int, n_bits: int, mode: Mode, candidates: Sequence[int], library_size: int) -> int:
    """ Fit workspace for one matrix: the binary32 source, every candidate's codebooks up to N, and the packed indices. """
    cb=sum(rows*2**n*2+(library_size*2**n*2 if Mode.parse(mode)==Mode.V2A else 0) for n in candidates if n<=n_bits)
    return 4*rows*cols+cb+int(np.ceil(rows*cols*get_scheme(n_bits).bits_per_weight/8))

def estimate_memory(profile: ModelProfile, assignment: dict, policy: Optional[QualityPolicy] = None,
                    outlier_fraction: Union[float,dict] = 0.0) -> MemoryEstimate:
    """ Steady-state and quantize-time peak footprint of a model at the given per-class widths.

    Args:
        assignment - per layer class, either one width or a {width: share of matrices} histogram
        outlier_fraction - expected share of weights stored as outlier triples, one value for the
            whole model or per layer class
    """
    policy=policy or QualityPolicy()
    assignment={LayerClass.parse(c):a for c,a in assignment.items()}
    if missing:=[g.layer_class.value for g in profile.groups if g.layer_class not in assignment]:
        raise ProfileError(f"No bit width assigned for {missing}")
    if isinstance(outlier_fraction,dict):
        outlier_fraction={LayerClass.parse(c):f for c,f in outlier_fraction.items()}
        out_frac=lambda cls: outlier_fraction.get(cls,0.0)
    else:
        out_frac=lambda cls: outlier_fraction
    steady=0.0
    peak_transient=0
    for g in profile.groups:
        steady+=out_frac(g.layer_class)*g.numel*OUTLIER_TRIPLE_BYTES
        fractions=_as_fractions(assignment[g.layer_class])
        for n,frac in fractions.items():
            for r,c in g.matrices:
                bits=effective_bits_for(profile.mode,n,r,c,group_size=policy.group_size,
                                        library_size=policy.library_size).total_without_outliers
                steady+=frac*g.copies*r*c*bits/8
        for r,c in g.matrices:
            peak_transient=max(peak_transient,transient_bytes(r,c,max(fractions),profile.mode,
                                                              policy.candidates(profile.mode),policy.library_size))
    eff=8*steady/profile.numel if profile.numel else 0.0
    steady+=profile.reserved_bytes
    return MemoryEstimate(steady_bytes=steady,spike_bytes=steady+peak_transient,effective_bits=eff)


@dataclasses.dataclass(frozen=True)
class OperatingPoint:
    label: str
    tau_strict: float
    tau_lazy: float
    histogram: dict[str,dict[int,int]]
    xfp4_fraction: float
    steady_bytes: float
    spike_bytes: float
    effective_bits: float
    verdict: str

    def to_dict(self) -> dict:
        d=dataclasses.asdict(self)
        d['histogram']={c:{str(n):k for n,k in h.items()} for c,h in self.histogram.items()}
        return d

Scorer=Callable[[MatrixLike,LayerClass,QualityPolicy,Mode],AutoSelectReport]

def representative_samples(profile: ModelProfile, seed: int = 0) -> dict[LayerClass,list[MatrixLike]]:
    """ Synthetic stand-ins for each class, drawn from the class's distribution profile. """
    return {g.layer_class:[generate(g.synth_profile,*g.sample_shape,seed=seed+i) for i in range(g.samples)]
            for g in profile.groups}

def sweep(profile: ModelProfile, grid: Sequence[GridPoint], policy: Optional[QualityPolicy] = None,
          samples: Optional[dict[LayerClass,list[MatrixLike]]] = None, verdicts: Optional[dict[str,str]] = None,
          scorer: Scorer = score_report, seed: int = 0, jobs: int = 1) -> list[OperatingPoint]:
    """ Classifies every grid point of the threshold sweep.

    Candidate cosines do not depend on the thresholds, so each sample is scored once and the
    ascending gate is re-applied per point; the per-class widths are then monotone in the thresholds.
    Outlier storage is charged at each class's measured outlier share, which is the same at every point.
    """
    check_grid(grid)
    policy=policy or QualityPolicy()
    verdicts=verdicts or {}
    if samples is None:
        samples=representative_samples(profile,seed=seed)
    if missing:=[g.layer_class.value for g in profile.groups if not len(samples.get(g.layer_class,[]))]:
        raise ProfileError(f"No sample matrices for {missing}")

    jobs_list=[(g.layer_class,W) for g in profile.groups for W in samples[g.layer_class]]
    score=lambda job: scorer(job[1],job[0],policy,profile.mode)
    with time_it(f"Scoring {len(jobs_list)} sample matrices",threshold_time=.5):
        if jobs>1:
            with ThreadPoolExecutor(max_workers=jobs) as executor:
                reports=list(executor.map(score,jobs_list))
        else:
            reports=[score(j) for j in jobs_list]
    by_class,outliers,sampled={},{},{}
    for (cls,W),r in zip(jobs_list,reports):
        by_class.setdefault(cls,[]).append(r.candidate_cos)
        outliers[cls]=outliers.get(cls,0)+r.outlier_count
        sampled[cls]=sampled.get(cls,0)+as_array(W).size
    outlier_fraction={cls:outliers[cls]/sampled[cls] for cls in by_class}

    points=[]
    for gp in grid:
        pt_policy=policy.with_taus(gp.tau_strict,gp.tau_lazy)
        histogram,assignment={},{}
        for g in profile.groups:
            tau=dispatch_tau(g.layer_class,pt_policy)
            chosen=[choose_bits(s,tau,pt_policy.candidates(profile.mode))[0] for s in by_class[g.layer_class]]
            histogram[g.layer_class.value]={int(n):int(k) for n,k in zip(*np.unique(chosen,return_counts=True))}
            assignment[g.layer_class]=histogram[g.layer_class.value]
        mem=estimate_memory(profile,assignment,pt_policy,outlier_fraction=outlier_fraction)
        numel=profile.numel
        xfp4=sum(g.numel*sum(k for n,k in histogram[g.layer_class.value].items() if n>=4)/len(by_class[g.layer_class])
                 for g in profile.groups)/numel if numel else 0.0
        if mem.spike_bytes>profile.envelope_bytes: verdict='oom'
        elif verdicts.get(gp.label,'pass')=='garbage': verdict='external-garbage'
        else: verdict='fits'
        logger.info(f"{gp.label} ({gp.tau_strict}, {gp.tau_lazy}): {mem.effective_bits:.3f} bits,"\
                    f" spike {format_gib(mem.spike_bytes):.1f} GiB -> {verdict}")
        points.append(OperatingPoint(label=gp.label,tau_strict=gp.tau_strict,tau_lazy=gp.tau_lazy,histogram=histogram,
                                     xfp4_fraction=xfp4,steady_bytes=mem.steady_bytes,spike_bytes=mem.spike_bytes,
                                     effective_bits=mem.effective_bits,verdict=verdict))
    return points

def sweep_table(points: Sequence[OperatingPoint], device_count: int = 1) -> pd.DataFrame:
    return pd.DataFrame([{'Var.':p.label,'tau_strict':p.tau_strict,'tau_lazy':p.tau_lazy,
                          'xfp4 %':100*p.xfp4_fraction,
                          'Steady GiB/dev':format_gib(p.steady_bytes)/device_count,
                          'Spike GiB/dev':format_gib(p.spike_bytes)/device_count,
                          'Eff bits':p.effective_bits,'Verdict':p.verdict} for p in points])

def sweep_report(profile: ModelProfile, points: Sequence[OperatingPoint]) -> dict:
    return {'schema_version':SWEEP_SCHEMA_VERSION,'profile':profile.name,'mode':profile.mode.value,
            'envelope_bytes':profile.envelope_bytes,'device_count':profile.device_count,
            'reserved_bytes':profile.reserved_bytes,'points':[p.to_dict() for p in points],
            'appendix':{'warp_size':WARP_SIZE,'smem_per_cta':SMEM_PER_CTA}}


def break_even_outlier_fraction(bits_low: float, bits_high: float, cap_high: float,
                                bytes_per_outlier: float = OUTLIER_TRIPLE_BYTES) -> float:
    """ Outlier share y at which bits_low/8 + bytes_per_outlier*y equals bits_high/8 + cap_high*bytes_per_outlier. """
    if not bits_high>bits_low:
        raise BreakEvenError(f"bits_high ({bits_high}) must exceed bits_low ({bits_low})")
    if not bytes_per_outlier>0:
        raise BreakEvenError(f"Bytes per outlier must be positive, got {bytes_per_outlier}")
    return (bits_high/8-bits_low/8+cap_high*bytes_per_outlier)/bytes_per_outlier


def cli_sweep(*args):
    parser=argparse.ArgumentParser(description='Sweeps (tau_strict, tau_lazy) operating points over a model profile')
    parser.add_argument('profile',nargs='?',default='moe_397b_like',help='Profile JSON file or preset name')
    parser.add_argument('--grid',default='h_grid',help='Grid JSON file or preset name (default h_grid)')
    parser.add_argument('--verdicts',help='JSON file mapping point labels to "pass" or "garbage"')
    parser.add_argument('--seed',type=int,default=0,help='First seed for the sample matrices')
    parser.add_argument('--json',help='Also write the JSON report here')
    parser.add_argument('--format',choices=['text','json'],default='text',help='Stdout format (default text)')
    CliConfig.add_arguments(parser)
    namespace=parser.parse_args(args)
    conf=CliConfig.from_namespace(namespace)

    profile=load_profile(namespace.profile)
    grid=load_grid(namespace.grid)
    verdicts=None
    if namespace.verdicts:
        with open(namespace.verdicts) as f: verdicts=json.load(f)
    points=sweep(profile,grid,policy=conf.policy(),verdicts=verdicts,seed=namespace.seed,jobs=conf['XFP_JOBS'])
    report=sweep_report(profile,points)
    if namespace.json:
        Path(namespace.json).write_text(json.dumps(report,indent=2))
    if namespace.format=='json':
        sys.stdout.write(json.dumps(report,indent=2)+"\n")
    else:
        print(sweep_table(points,profile.device_count).to_string(index=False,float_format=lambda x: f"{x:.3f}"))
        print(f"\nEnvelope {format_gib(profile.envelope_bytes):.0f} GiB over {profile.device_count} device(s);"\
              f" warp size {WARP_SIZE}; per-CTA opt-in SMEM: "\
              +", ".join(f"{s['sm']} {s['smem_per_cta_kb']} KB" for s in SMEM_PER_CTA))

def cli_breakeven(*args):
    parser=argparse.ArgumentParser(description='Outlier share at which a narrower width stops saving memory')
    parser.add_argument('--bits-low',type=float,default=3,help='Narrower index width (default 3)')
    parser.add_argument('--bits-high',type=float,default=4,help='Wider index width (default 4)')
    parser.add_argument('--cap',type=float,default=0.02,help='Outlier share at the wider width (default 0.02)')
    parser.add_argument('--bytes-per-outlier',type=float,default=OUTLIER_TRIPLE_BYTES,help='Default 18')
    namespace=parser.parse_args(args)
    y=break_even_outlier_fraction(namespace.bits_low,namespace.bits_high,namespace.cap,namespace.bytes_per_outlier)
    print(json.dumps({'bits_low':namespace.bits_low,'bits_high':namespace.bits_high,'cap_high':namespace.cap,
                      'bytes_per_outlier':namespace.bytes_per_outlier,'fraction':y,'percent':round(100*y,2)}))
