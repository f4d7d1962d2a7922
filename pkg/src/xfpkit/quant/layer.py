import dataclasses
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from xfpkit import XfpError
from xfpkit.quant.autoselect import LayerClass, Mode, QualityPolicy, AutoSelectReport, CandidateFit, \
    select_with_fit, moe_select_with_fit, fit_candidate, dispatch_tau
from xfpkit.quant.library import CodebookLibrary, GroupAssignment, decode_groups, group_count, GROUP_PARAM_BITS
from xfpkit.quant.lloyd import ChannelCodebookSet
from xfpkit.quant.outlier import OutlierSet, extract_outliers, apply_outliers, OUTLIER_TRIPLE_BYTES
from xfpkit.quant.packing import PackedIndices, pack, unpack, get_scheme, v2a_lane_geometry, SCHEMES
from xfpkit.quant.tensor import MatrixLike, WeightMatrix, QualityReport, as_array, quality_report
from xfpkit.util.logging import logger

class LayerFormatError(XfpError, ValueError): pass


@dataclasses.dataclass(frozen=True,eq=False)
class QuantizedLayer:
    """ One encoded weight matrix: packed indices, its codebook payload and its outliers.

    V2 layers carry ``codebooks`` (one per row), V2a layers carry ``library`` and ``assignment``.
    """
    name: str
    mode: Mode
    n_bits: int
    shape: tuple[int,int]
    layer_class: LayerClass
    packed: PackedIndices
    outliers: OutlierSet
    codebooks: Optional[ChannelCodebookSet] = None
    library: Optional[CodebookLibrary] = None
    assignment: Optional[GroupAssignment] = None
    residual_convention: str = 'add'
    report: Optional[AutoSelectReport] = None

    def __post_init__(self):
        object.__setattr__(self,'shape',tuple(int(s) for s in self.shape))
        check_admissible(self.mode,self.n_bits,self.group_size)
        if self.packed.scheme.n_bits!=self.n_bits or self.packed.shape!=self.shape:
            raise LayerFormatError(f"Layer '{self.name}': packed indices do not match N={self.n_bits}, {self.shape}")
        if self.mode==Mode.V2:
            if self.codebooks is None or len(self.codebooks)!=self.rows or self.codebooks.n_bits!=self.n_bits:
                raise LayerFormatError(f"Layer '{self.name}': V2 needs {self.rows} codebooks at N={self.n_bits}")
        else:
            if self.library is None or self.assignment is None or self.library.n_bits!=self.n_bits:
                raise LayerFormatError(f"Layer '{self.name}': V2a needs a library at N={self.n_bits} and group assignments")
            channels,per_channel=(self.rows,self.cols) if self.orientation=='row' else (self.cols,self.rows)
            if self.assignment.library_index.shape!=(channels,group_count(per_channel,self.group_size)):
                raise LayerFormatError(f"Layer '{self.name}': assignment shape {self.assignment.library_index.shape}"\
                                       f" does not fit {self.shape} at group size {self.group_size}")

    @property
    def rows(self) -> int: return self.shape[0]
    @property
    def cols(self) -> int: return self.shape[1]
    @property
    def numel(self) -> int: return self.shape[0]*self.shape[1]
    @property
    def group_size(self) -> int:
        return self.assignment.group_size if self.assignment is not None else 0
    @property
    def orientation(self) -> str:
        return self.assignment.orientation if self.assignment is not None else 'row'


def check_admissible(mode: Mode, n_bits: int, group_size: int = 0):
    mode=Mode.parse(mode)
    if n_bits not in SCHEMES:
        raise LayerFormatError(f"No packing scheme for N={n_bits}")
    if mode==Mode.V2A and not (geo:=v2a_lane_geometry(n_bits,group_size or 128)).admissible:
        raise LayerFormatError(f"V2a is not admissible at N={n_bits}, group size {group_size}: {geo.reason}")


def _layer_from_fit(name: str, layer_class: LayerClass, fit: CandidateFit, shape, policy: QualityPolicy,
                    report: AutoSelectReport) -> QuantizedLayer:
    return QuantizedLayer(name=name,mode=fit.mode,n_bits=fit.n_bits,shape=shape,layer_class=layer_class,
                          packed=pack(fit.indices,fit.n_bits),outliers=fit.outliers,
                          codebooks=fit.codebooks,library=fit.library,assignment=fit.assignment,
                          residual_convention=policy.residual_convention,report=report)

def encode_layer(W: MatrixLike, layer_class: LayerClass, policy: QualityPolicy, mode: Mode,
                 name: str = '', n_bits: Optional[int] = None) -> QuantizedLayer:
    """ Outlier extraction, auto-select (unless ``n_bits`` is forced), codebook fit, residuals and packing. """
    layer_class,mode=LayerClass.parse(layer_class),Mode.parse(mode)
    x=as_array(WeightMatrix(as_array(W)))
    if n_bits is None:
        report,fit=select_with_fit(x,layer_class,policy,mode)
    else:
        check_admissible(mode,n_bits,policy.group_size)
        bulk,outliers=extract_outliers(x,k=policy.k,cap_fraction=policy.cap_fraction)
        fit=fit_candidate(x,bulk,outliers,n_bits,mode,layer_class,policy)
        report=AutoSelectReport(layer_class=layer_class,mode=mode,candidate_cos={n_bits:fit.median_cos},
                                chosen_n=n_bits,active_tau=dispatch_tau(layer_class,policy),
                                fallback_used=False,outlier_count=len(outliers))
    logger.info(f"Layer '{name}' ({layer_class.value}, {x.shape[0]}x{x.shape[1]}): N={report.chosen_n}"\
                f" cos={report.candidate_cos[report.chosen_n]:.5f}"+(" (fallback)" if report.fallback_used else ""))
    return _layer_from_fit(name,layer_class,fit,x.shape,policy,report)

def encode_expert_group(experts: Sequence[tuple[str,MatrixLike]], policy: QualityPolicy, mode: Mode) -> list[QuantizedLayer]:
    """ Picks one width from a sample of the experts, then encodes every expert at that width. """
    report,_=moe_select_with_fit([W for _,W in experts],policy,mode)
    layers=[]
    for name,W in experts:
        layer=encode_layer(W,LayerClass.ROUTED_EXPERT,policy,mode,name=name,n_bits=report.chosen_n)
        layers.append(dataclasses.replace(layer,report=dataclasses.replace(report,outlier_count=len(layer.outliers))))
    return layers


def decode_bulk(layer: QuantizedLayer) -> np.ndarray:
    """ Codebook-only reconstruction (outlier path disabled), binary32. """
    idx=unpack(layer.packed)
    if layer.mode==Mode.V2:
        return layer.codebooks.decode(idx)
    if len(layer.assignment) and layer.assignment.library_index.max()>=layer.library.size:
        raise LayerFormatError(f"Layer '{layer.name}': group assignment beyond library of {layer.library.size}")
    return decode_groups(idx,layer.assignment,layer.library)

def decode_layer(layer: QuantizedLayer) -> WeightMatrix:
    """ Unpack, gather codebook values, then scatter the outliers per the layer's residual convention. """
    return WeightMatrix(apply_outliers(decode_bulk(layer),layer.outliers,layer.residual_convention))

def layer_quality(layer: QuantizedLayer, W: MatrixLike) -> QualityReport:
    bulk=decode_bulk(layer)
    return quality_report(W,bulk,apply_outliers(bulk,layer.outliers,layer.residual_convention))


@dataclasses.dataclass(frozen=True)
class EffectiveBits:
    index_bits_per_weight: float
    codebook_overhead_bits_per_weight: float
    outlier_bits_per_weight: float

    @property
    def total(self) -> float:
        return self.index_bits_per_weight+self.codebook_overhead_bits_per_weight+self.outlier_bits_per_weight

    @property
    def total_without_outliers(self) -> float:
        return self.index_bits_per_weight+self.codebook_overhead_bits_per_weight

    def to_dict(self) -> dict:
        return {'index':self.index_bits_per_weight,'codebook_overhead':self.codebook_overhead_bits_per_weight,
                'outliers':self.outlier_bits_per_weight,'total':self.total,
                'total_without_outliers':self.total_without_outliers}

def effective_bits_for(mode: Mode, n_bits: int, rows: int, cols: int, outlier_count: int = 0,
                       group_size: int = 128, library_size: int = 32, orientation: str = 'row') -> EffectiveBits:
    """ Storage cost per parameter of a layer with the given geometry.

    V2a group parameters are counted per actual group, so short tail groups cost a full group's parameters.
    """
    numel=rows*cols
    index_bits=get_scheme(n_bits).bits_per_weight
    if Mode.parse(mode)==Mode.V2:
        overhead=2**n_bits*16*rows/numel
    else:
        channels,per_channel=(rows,cols) if orientation=='row' else (cols,rows)
        overhead=(GROUP_PARAM_BITS*channels*group_count(per_channel,group_size)+library_size*2**n_bits*16)/numel
    return EffectiveBits(index_bits_per_weight=index_bits,codebook_overhead_bits_per_weight=overhead,
                         outlier_bits_per_weight=8*OUTLIER_TRIPLE_BYTES*outlier_count/numel)

def effective_bits(layer: QuantizedLayer) -> EffectiveBits:
    return effective_bits_for(layer.mode,layer.n_bits,layer.rows,layer.cols,outlier_count=len(layer.outliers),
                              group_size=layer.group_size or 128,
                              library_size=layer.library.size if layer.library is not None else 0,
                              orientation=layer.orientation)


def reconstruction_table(layers: Sequence[QuantizedLayer], originals: dict[str,MatrixLike]) -> pd.DataFrame:
    """ Per-layer codebook-only vs with-outlier reconstruction quality, for layers with a supplied original. """
    rows=[]
    for layer in layers:
        if layer.name not in originals:
            logger.debug(f"No original supplied for layer '{layer.name}'")
            continue
        q=layer_quality(layer,originals[layer.name])
        rows.append({'layer':layer.name,'class':layer.layer_class.value,'N':layer.n_bits,
                     'cos_bulk':q.median_cos_bulk,'cos_outlier':q.median_cos,'delta_cos':q.delta_cos,
                     'mse_ratio':q.mse_ratio})
    return pd.DataFrame(rows,columns=['layer','class','N','cos_bulk','cos_outlier','delta_cos','mse_ratio'])

def summarize_reconstruction(table: pd.DataFrame) -> pd.DataFrame:
    """ Aggregates a reconstruction table per layer class. """
    if not len(table):
        return pd.DataFrame(columns=['class','n','cos_bulk','cos_outlier','delta_cos_mean','delta_cos_max',
                                     'mse_ratio_p50','mse_ratio_p90'])
    return table.groupby('class',sort=True).agg(
        n=('layer','count'),cos_bulk=('cos_bulk','mean'),cos_outlier=('cos_outlier','mean'),
        delta_cos_mean=('delta_cos','mean'),delta_cos_max=('delta_cos','max'),
        mse_ratio_p50=('mse_ratio',lambda s: float(np.percentile(s,50))),
        mse_ratio_p90=('mse_ratio',lambda s: float(np.percentile(s,90))),
    ).reset_index().sort_values('delta_cos_mean',ascending=False,ignore_index=True)
