import dataclasses
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from xfpkit import XfpError
from xfpkit.quant.library import CodebookLibrary, GroupAssignment, libfit, assign_groups, decode_groups, \
    DEFAULT_LIBRARY_SIZE, DEFAULT_GROUP_SIZE, GROUP_ORIENTATIONS
from xfpkit.quant.lloyd import ChannelCodebookSet, fit_channel_codebooks, assign_indices, \
    DEFAULT_LLOYD_ITERS, DEFAULT_MOE_LLOYD_ITERS
from xfpkit.quant.outlier import OutlierSet, extract_outliers, finalize_residuals, apply_outliers, \
    RESIDUAL_CONVENTIONS
from xfpkit.quant.packing import SCHEMES, v2a_lane_geometry
from xfpkit.quant.tensor import MatrixLike, as_array, per_channel_cosine, lower_median
from xfpkit.util.logging import logger, time_it

class PolicyError(XfpError, ValueError): pass
class ExpertShapeError(XfpError, ValueError): pass


class LayerClass(Enum):
    SELF_ATTENTION='self_attention'
    LINEAR_ATTENTION='linear_attention'
    SHARED_EXPERT='shared_expert'
    ROUTED_EXPERT='routed_expert'
    LM_HEAD='lm_head'

    @staticmethod
    def parse(name) -> 'LayerClass':
        if isinstance(name,LayerClass): return name
        try: return LayerClass(str(name).lower())
        except ValueError:
            raise PolicyError(f"Unknown layer class '{name}', options are {[c.value for c in LayerClass]}") from None

class Mode(Enum):
    V2='v2'
    V2A='v2a'

    @staticmethod
    def parse(name) -> 'Mode':
        if isinstance(name,Mode): return name
        try: return Mode(str(name).lower())
        except ValueError:
            raise PolicyError(f"Unknown storage mode '{name}', options are {[m.value for m in Mode]}") from None


@dataclasses.dataclass(frozen=True)
class QualityPolicy:
    tau_strict: float = 0.96
    tau_lazy: float = 0.93
    k: float = 4.0
    cap_fraction: float = 0.02
    candidates_v2: tuple[int,...] = (2,3,4)
    candidates_v2a: tuple[int,...] = (2,4)
    group_size: int = DEFAULT_GROUP_SIZE
    lloyd_iters: int = DEFAULT_LLOYD_ITERS
    moe_lloyd_iters: int = DEFAULT_MOE_LLOYD_ITERS
    moe_sample_size: int = 4
    moe_sample_seed: Optional[int] = None
    library_size: int = DEFAULT_LIBRARY_SIZE
    residual_convention: str = 'add'
    group_orientation: str = 'row'

    def __post_init__(self):
        object.__setattr__(self,'candidates_v2',tuple(int(n) for n in self.candidates_v2))
        object.__setattr__(self,'candidates_v2a',tuple(int(n) for n in self.candidates_v2a))
        if not self.tau_lazy<=self.tau_strict:
            raise PolicyError(f"Lazy floor {self.tau_lazy} must not exceed strict floor {self.tau_strict}")
        if not self.k>0:
            raise PolicyError(f"Outlier multiplier k must be positive, got {self.k}")
        if not 0<=self.cap_fraction<=1:
            raise PolicyError(f"Outlier cap must be a fraction in [0,1], got {self.cap_fraction}")
        for name,cands in [('V2',self.candidates_v2),('V2a',self.candidates_v2a)]:
            if not len(cands):
                raise PolicyError(f"Empty {name} candidate set")
            if list(cands)!=sorted(set(cands)):
                raise PolicyError(f"{name} candidates must be sorted ascending without repeats, got {cands}")
            if any(n not in SCHEMES for n in cands):
                raise PolicyError(f"{name} candidates {cands} include a width with no packing scheme")
        if self.group_size<1:
            raise PolicyError(f"Group size must be positive, got {self.group_size}")
        if bad:=[n for n in self.candidates_v2a if not v2a_lane_geometry(n,self.group_size).admissible]:
            raise PolicyError(f"V2a candidates {bad} are not admissible at group size {self.group_size}")
        if self.lloyd_iters<0 or self.moe_lloyd_iters<0:
            raise PolicyError("Lloyd iteration counts must be non-negative")
        if self.moe_sample_size<1:
            raise PolicyError(f"MoE sample size must be at least 1, got {self.moe_sample_size}")
        if not 1<=self.library_size<=256:
            raise PolicyError(f"Library size must be in [1,256], got {self.library_size}")
        if self.residual_convention not in RESIDUAL_CONVENTIONS:
            raise PolicyError(f"Residual convention must be one of {RESIDUAL_CONVENTIONS}")
        if self.group_orientation not in GROUP_ORIENTATIONS:
            raise PolicyError(f"Group orientation must be one of {GROUP_ORIENTATIONS}")

    def candidates(self, mode: Mode) -> tuple[int,...]:
        return self.candidates_v2 if Mode.parse(mode)==Mode.V2 else self.candidates_v2a

    def iters_for(self, layer_class: LayerClass) -> int:
        return self.moe_lloyd_iters if layer_class==LayerClass.ROUTED_EXPERT else self.lloyd_iters

    def with_taus(self, tau_strict: float, tau_lazy: float) -> 'QualityPolicy':
        return dataclasses.replace(self,tau_strict=tau_strict,tau_lazy=tau_lazy)


def dispatch_tau(layer_class: LayerClass, policy: QualityPolicy) -> float:
    return policy.tau_lazy if LayerClass.parse(layer_class)==LayerClass.ROUTED_EXPERT else policy.tau_strict


@dataclasses.dataclass(frozen=True)
class AutoSelectReport:
    layer_class: LayerClass
    mode: Mode
    candidate_cos: dict[int,float]
    chosen_n: int
    active_tau: float
    fallback_used: bool
    outlier_count: int = 0
    sampled_experts: tuple[int,...] = ()

    def to_dict(self) -> dict:
        return {'class':self.layer_class.value,'mode':self.mode.value,
                'candidate_cos':{str(n):c for n,c in self.candidate_cos.items()},
                'chosen_n':self.chosen_n,'active_tau':self.active_tau,'fallback_used':self.fallback_used,
                'outlier_count':self.outlier_count,'sampled_experts':list(self.sampled_experts)}


@dataclasses.dataclass(frozen=True,eq=False)
class CandidateFit:
    """ Everything produced by encoding the bulk at one bit width. """
    n_bits: int
    mode: Mode
    indices: np.ndarray
    outliers: OutlierSet
    bulk_recon: np.ndarray
    full_recon: np.ndarray
    per_channel_cos: np.ndarray
    codebooks: Optional[ChannelCodebookSet] = None
    library: Optional[CodebookLibrary] = None
    assignment: Optional[GroupAssignment] = None

    @property
    def median_cos(self) -> float:
        return lower_median(self.per_channel_cos)


def fit_candidate(W: MatrixLike, bulk: np.ndarray, outliers: OutlierSet, n_bits: int, mode: Mode,
                  layer_class: LayerClass, policy: QualityPolicy) -> CandidateFit:
    """ Fits codebooks at one width, reconstructs with the outlier values applied and scores against W. """
    mode=Mode.parse(mode)
    x=as_array(W)
    iters=policy.iters_for(layer_class)
    cbs=fit_channel_codebooks(bulk,n_bits,iters=iters)
    if mode==Mode.V2:
        library,assignment=None,None
        indices=assign_indices(bulk,cbs)
        bulk_recon=cbs.decode(indices)
    else:
        library=libfit(cbs,L=policy.library_size,iters=iters)
        assignment,indices=assign_groups(bulk,library,group_size=policy.group_size,
                                         orientation=policy.group_orientation)
        bulk_recon=decode_groups(indices,assignment,library)
        cbs=None
    if policy.residual_convention=='add':
        outliers=finalize_residuals(outliers,x,bulk_recon)
    full_recon=apply_outliers(bulk_recon,outliers,policy.residual_convention)
    return CandidateFit(n_bits=n_bits,mode=mode,indices=indices,outliers=outliers,
                        bulk_recon=bulk_recon,full_recon=full_recon,per_channel_cos=per_channel_cosine(x,full_recon),
                        codebooks=cbs,library=library,assignment=assignment)


def choose_bits(scores: dict[int,float], tau: float, candidates: Sequence[int] = None) -> tuple[int,bool]:
    """ The ascending gate: the first candidate whose median cosine reaches tau, else the largest.

    Returns:
        (chosen width, whether the fallback was used)
    """
    candidates=sorted(candidates if candidates is not None else scores)
    for n in candidates:
        if scores[n]>=tau: return n, False
    return candidates[-1], True

def select_with_fit(W: MatrixLike, layer_class: LayerClass, policy: QualityPolicy, mode: Mode,
            exhaustive: bool = False) -> tuple[AutoSelectReport,CandidateFit]:
    layer_class,mode=LayerClass.parse(layer_class),Mode.parse(mode)
    x=as_array(W)
    tau=dispatch_tau(layer_class,policy)
    bulk,outliers=extract_outliers(x,k=policy.k,cap_fraction=policy.cap_fraction)
    scores,chosen_fit={},None
    with time_it(f"Auto-select on {x.shape} ({layer_class.value}, {mode.value})",threshold_time=.5):
        for n in policy.candidates(mode):
            fit=fit_candidate(x,bulk,outliers,n,mode,layer_class,policy)
            scores[n]=fit.median_cos
            if chosen_fit is None and scores[n]>=tau:
                chosen_fit=fit
                if not exhaustive: break
    chosen_n,fallback=choose_bits(scores,tau)
    if fallback:
        logger.warning(f"No candidate reached cos {tau:.4g} for a {x.shape} {layer_class.value} matrix"\
                       f" (best {max(scores.values()):.5f}), falling back to N={chosen_n}")
        chosen_fit=fit
    report=AutoSelectReport(layer_class=layer_class,mode=mode,candidate_cos=scores,chosen_n=chosen_n,
                            active_tau=tau,fallback_used=fallback,outlier_count=len(outliers))
    return report, chosen_fit

def auto_select(W: MatrixLike, layer_class: LayerClass, policy: QualityPolicy, mode: Mode) -> AutoSelectReport:
    """ Smallest candidate width whose median per-channel cosine reaches the class floor.

    Outliers are extracted once; every candidate refits from the same bulk and is scored
    with its outlier values applied, against the original W.
    """
    return select_with_fit(W,layer_class,policy,mode)[0]

def score_report(W: MatrixLike, layer_class: LayerClass, policy: QualityPolicy, mode: Mode) -> AutoSelectReport:
    """ Auto-select report with every candidate scored (no early exit), outlier count included. """
    return select_with_fit(W,layer_class,policy,mode,exhaustive=True)[0]

def score_candidates(W: MatrixLike, layer_class: LayerClass, policy: QualityPolicy, mode: Mode) -> dict[int,float]:
    """ Median per-channel cosine at every candidate width (no early exit). """
    return score_report(W,layer_class,policy,mode).candidate_cos


def _stack_experts(experts: Sequence[MatrixLike]) -> list[np.ndarray]:
    if not len(experts):
        raise ExpertShapeError("Need at least one expert")
    arrs=[as_array(e) for e in experts]
    if len(shapes:=set(a.shape for a in arrs))>1:
        raise ExpertShapeError(f"Experts differ in shape: {sorted(shapes)}")
    return arrs

def sample_expert_ids(n_experts: int, policy: QualityPolicy) -> tuple[int,...]:
    """ The lowest expert indices, or a seeded random draw when the policy names a seed. """
    k=min(policy.moe_sample_size,n_experts)
    if policy.moe_sample_seed is None:
        return tuple(range(k))
    rng=np.random.Generator(np.random.Philox(policy.moe_sample_seed))
    return tuple(int(i) for i in np.sort(rng.choice(n_experts,size=k,replace=False)))

def moe_select_with_fit(experts: Sequence[MatrixLike], policy: QualityPolicy, mode: Mode):
    arrs=_stack_experts(experts)
    ids=sample_expert_ids(len(arrs),policy)
    report,fit=select_with_fit(np.vstack([arrs[i] for i in ids]),LayerClass.ROUTED_EXPERT,policy,mode)
    return dataclasses.replace(report,sampled_experts=ids), fit

def moe_sample_select(experts: Sequence[MatrixLike], policy: QualityPolicy, mode: Mode) -> AutoSelectReport:
    """ Auto-select for a routed-expert population, run on a concatenated sample of its experts. """
    return moe_select_with_fit(experts,policy,mode)[0]


@dataclasses.dataclass(frozen=True)
class AgreementReport:
    pairs: tuple[tuple[int,int],...]
    disagreements: int
    under: int
    over: int

    @property
    def rate(self) -> float:
        return self.disagreements/len(self.pairs) if len(self.pairs) else 0.0

    def to_dict(self) -> dict:
        return {'populations':len(self.pairs),'disagreements':self.disagreements,'rate':self.rate,
                'under':self.under,'over':self.over,'pairs':[list(p) for p in self.pairs]}

def sampling_agreement(populations: Sequence[Sequence[MatrixLike]], policy: QualityPolicy, mode: Mode) -> AgreementReport:
    """ Compares the sampled decision with the full-population decision for each expert population.

    'under' counts populations where the sample picked a smaller width than the full population.
    """
    pairs=[]
    for i,experts in enumerate(populations):
        sampled=moe_sample_select(experts,policy,mode).chosen_n
        full=auto_select(np.vstack(_stack_experts(experts)),LayerClass.ROUTED_EXPERT,policy,mode).chosen_n
        if sampled!=full:
            logger.warning(f"Population {i}: sample of {min(policy.moe_sample_size,len(experts))} picked N={sampled},"\
                           f" full population of {len(experts)} picks N={full}"\
                           f" ({'under' if sampled<full else 'over'})")
        pairs.append((sampled,full))
    return AgreementReport(pairs=tuple(pairs),disagreements=sum(s!=f for s,f in pairs),
                           under=sum(s<f for s,f in pairs),over=sum(s>f for s,f in pairs))
