import dataclasses
from typing import Union

import numpy as np

from xfpkit import XfpError


class ShapeMismatchError(XfpError, ValueError): pass
class HalfNaNError(XfpError, ValueError): pass
class HalfOverflowError(XfpError, OverflowError): pass
class InvalidMatrixError(XfpError, ValueError): pass

HALF_MAX=65504.0


@dataclasses.dataclass(frozen=True)
class Half:
    """ An IEEE binary16 value held as its 16-bit pattern. NaN patterns are rejected. """
    bits: int

    def __post_init__(self):
        assert 0<=self.bits<=0xFFFF, f"{self.bits} is not a 16-bit pattern"
        if (self.bits & 0x7C00)==0x7C00 and (self.bits & 0x03FF):
            raise HalfNaNError(f"0x{self.bits:04X} is a binary16 NaN")

    @staticmethod
    def from_float(x: float) -> 'Half':
        return Half(int(to_half([x]).view(np.uint16)[0]))

    def __float__(self):
        return float(np.array([self.bits],dtype=np.uint16).view(np.float16)[0])


def to_half(x) -> np.ndarray:
    """ Rounds binary32 values to binary16 (round-to-nearest-even).

    NaNs are rejected, and so are finite values that round past the largest half (65504).
    """
    f=np.asarray(x,dtype=np.float32)
    with np.errstate(over='ignore'):
        h=f.astype(np.float16)
    if np.isnan(h).any():
        raise HalfNaNError("NaN cannot be stored as a half")
    if (overflow:=np.isinf(h)&np.isfinite(f)).any():
        raise HalfOverflowError(f"{f[overflow].ravel()[0]:g} is beyond the binary16 range (max {HALF_MAX:g})")
    return h

def half_from_bits(bits) -> np.ndarray:
    """ Interprets uint16 patterns as binary16, rejecting NaN patterns. """
    bits=np.asarray(bits,dtype=np.uint16)
    if (((bits & 0x7C00)==0x7C00) & ((bits & 0x03FF)!=0)).any():
        raise HalfNaNError("NaN pattern among half values")
    return bits.view(np.float16)

def half_ulp(x) -> np.ndarray:
    """ One binary16 unit in the last place at the magnitude of x, as binary32. """
    return np.spacing(np.abs(np.asarray(x,dtype=np.float32)).astype(np.float16)).astype(np.float32)


@dataclasses.dataclass(frozen=True,eq=False)
class WeightMatrix:
    """ A dense 2-D binary32 weight matrix, rows are output channels. Read-only once built. """
    data: np.ndarray

    def __post_init__(self):
        data=np.array(self.data,dtype=np.float32,copy=True,order='C')
        if data.ndim!=2:
            raise InvalidMatrixError(f"Weight matrices are 2-D, got shape {data.shape}")
        if data.shape[0]<1 or data.shape[1]<1:
            raise InvalidMatrixError(f"Weight matrix needs at least one row and column, got {data.shape}")
        if not np.isfinite(data).all():
            raise InvalidMatrixError("Weight matrix contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self,'data',data)

    @property
    def rows(self) -> int: return self.data.shape[0]
    @property
    def cols(self) -> int: return self.data.shape[1]
    @property
    def shape(self) -> tuple[int,int]: return self.data.shape
    @property
    def numel(self) -> int: return self.data.size

MatrixLike=Union[WeightMatrix,np.ndarray]

def as_array(W: MatrixLike) -> np.ndarray:
    return W.data if isinstance(W,WeightMatrix) else np.asarray(W,dtype=np.float32)

def _check_same_shape(a,b):
    if a.shape!=b.shape:
        raise ShapeMismatchError(f"Shape mismatch: {a.shape} vs {b.shape}")


def channel_stats(W: MatrixLike) -> tuple[float,float]:
    """ Mean and population standard deviation over the whole matrix (binary64 accumulation). """
    x=as_array(W).astype(np.float64)
    mu=float(x.mean())
    return mu, float(np.sqrt(np.mean((x-mu)**2)))

def per_channel_cosine(W: MatrixLike, W_hat: MatrixLike) -> np.ndarray:
    """ Cosine similarity of each row of W with the same row of W_hat.

    Two zero rows compare as 1.0 (nothing reconstructed perfectly); a zero row against
    a non-zero row compares as 0.0.
    """
    a,b=as_array(W),as_array(W_hat)
    _check_same_shape(a,b)
    a,b=a.astype(np.float64),b.astype(np.float64)
    dots=np.einsum('ij,ij->i',a,b)
    na,nb=np.linalg.norm(a,axis=1),np.linalg.norm(b,axis=1)
    with np.errstate(invalid='ignore',divide='ignore'):
        cos=np.clip(dots/(na*nb),-1,1)
    cos[(na==0)&(nb==0)]=1.0
    cos[(na==0)^(nb==0)]=0.0
    return cos

def mse(W: MatrixLike, W_hat: MatrixLike) -> float:
    a,b=as_array(W),as_array(W_hat)
    _check_same_shape(a,b)
    return float(np.mean((a.astype(np.float64)-b.astype(np.float64))**2))

def lower_median(x) -> float:
    """ The exact median, taking the lower of the two middle order statistics for even counts. """
    x=np.sort(np.asarray(x,dtype=np.float64).ravel())
    assert len(x), "Median of nothing"
    if np.isnan(x).any():
        raise InvalidMatrixError("NaN among the values whose median was requested")
    return float(x[(len(x)-1)//2])


@dataclasses.dataclass(frozen=True,eq=False)
class QualityReport:
    per_channel_cos: np.ndarray
    median_cos: float
    mse_bulk: float
    mse_full: float
    mse_ratio: float
    # Codebook-only (outlier path disabled) view of the same encoding
    per_channel_cos_bulk: np.ndarray = None
    median_cos_bulk: float = None

    @property
    def delta_cos(self) -> float:
        return self.median_cos-self.median_cos_bulk

def quality_report(W: MatrixLike, W_bulk_recon: MatrixLike, W_full_recon: MatrixLike) -> QualityReport:
    """ Reconstruction quality of one encoding, with and without its outlier residuals. """
    cos=per_channel_cosine(W,W_full_recon)
    cos_bulk=per_channel_cosine(W,W_bulk_recon)
    mse_bulk,mse_full=mse(W,W_bulk_recon),mse(W,W_full_recon)
    if mse_full>0: ratio=mse_bulk/mse_full
    else: ratio=1.0 if mse_bulk==0 else float('inf')
    return QualityReport(per_channel_cos=cos,median_cos=lower_median(cos),
                         mse_bulk=mse_bulk,mse_full=mse_full,mse_ratio=ratio,
                         per_channel_cos_bulk=cos_bulk,median_cos_bulk=lower_median(cos_bulk))
