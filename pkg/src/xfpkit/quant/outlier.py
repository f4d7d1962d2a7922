import dataclasses
import math

import numpy as np

from xfpkit import XfpError
from xfpkit.quant.tensor import MatrixLike, Half, as_array, channel_stats, to_half

# row index int64 + column index int64 + binary16 value
OUTLIER_TRIPLE_BYTES=18
RESIDUAL_CONVENTIONS=('add','overwrite')

class OutlierPositionError(XfpError, IndexError): pass
class OutlierParameterError(XfpError, ValueError): pass


@dataclasses.dataclass(frozen=True,eq=False)
class OutlierSet:
    """ Sparse (row, col, half value) triples pulled out of a weight matrix.

    Positions are unique and kept in row-major order. Right after extraction the values
    are the raw weights; finalize_residuals() turns them into residuals against the
    codebook reconstruction (``residual`` is then True).
    """
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    k: float
    cap_fraction: float
    mu_used: float
    sigma_used: float
    residual: bool = False

    def __post_init__(self):
        object.__setattr__(self,'rows',np.asarray(self.rows,dtype=np.int64))
        object.__setattr__(self,'cols',np.asarray(self.cols,dtype=np.int64))
        object.__setattr__(self,'values',np.asarray(self.values,dtype=np.float16))
        assert len(self.rows)==len(self.cols)==len(self.values)

    def __len__(self):
        return len(self.rows)

    @property
    def entries(self) -> list[tuple[int,int,Half]]:
        return [(int(r),int(c),Half(int(b))) for r,c,b in zip(self.rows,self.cols,self.values.view(np.uint16))]

    @staticmethod
    def empty(k=4.0,cap_fraction=0.02,mu_used=0.0,sigma_used=0.0) -> 'OutlierSet':
        return OutlierSet(rows=np.empty(0,np.int64),cols=np.empty(0,np.int64),values=np.empty(0,np.float16),
                          k=k,cap_fraction=cap_fraction,mu_used=mu_used,sigma_used=sigma_used)


def max_outliers(cap_fraction: float, numel: int) -> int:
    # round() first so that e.g. 0.02*10000 doesn't land on 199.99999...
    return int(math.floor(round(cap_fraction*numel,9)))

def extract_outliers(W: MatrixLike, k: float = 4.0, cap_fraction: float = 0.02) -> tuple[np.ndarray,OutlierSet]:
    """ Splits W into a bulk matrix and a sparse set of high-deviation weights.

    Every position with |w-mu| > k*sigma (mu, sigma over the whole matrix) is extracted,
    unless that would exceed floor(cap_fraction*numel) positions, in which case the
    largest deviations win (ties to the lower (row, col)). Extracted positions read mu in the bulk.

    Returns:
        bulk - binary32 copy of W with the extracted positions set to mu
        outliers - OutlierSet holding the raw weights at those positions
    """
    if not k>0:
        raise OutlierParameterError(f"Outlier threshold multiplier must be positive, got {k}")
    if not 0<=cap_fraction<=1:
        raise OutlierParameterError(f"Outlier cap must be a fraction in [0,1], got {cap_fraction}")
    x=as_array(W)
    mu,sigma=channel_stats(x)
    flat_x=x.ravel()
    if sigma==0:
        flat=np.empty(0,dtype=np.int64)
    else:
        dev=np.abs(flat_x.astype(np.float64)-mu)
        flat=np.flatnonzero(dev>k*sigma)
        cap=max_outliers(cap_fraction,x.size)
        if len(flat)>cap:
            # lexsort: last key is primary -> descending deviation, then ascending flat (= row,col) index
            order=np.lexsort((flat,-dev[flat]))
            flat=np.sort(flat[order[:cap]])
    bulk=x.copy()
    bulk.reshape(-1)[flat]=np.float32(mu)
    rows,cols=np.divmod(flat,x.shape[1])
    return bulk, OutlierSet(rows=rows,cols=cols,values=to_half(flat_x[flat]),
                            k=float(k),cap_fraction=float(cap_fraction),mu_used=mu,sigma_used=sigma)

def _check_positions(outliers: OutlierSet, shape):
    if len(outliers)==0: return
    if outliers.rows.min()<0 or outliers.cols.min()<0 \
            or outliers.rows.max()>=shape[0] or outliers.cols.max()>=shape[1]:
        raise OutlierPositionError(f"Outlier position outside a {shape} matrix")

def finalize_residuals(outliers: OutlierSet, W: MatrixLike, W_bulk_recon: MatrixLike) -> OutlierSet:
    """ Replaces each stored value with half(W[r,c] - W_bulk_recon[r,c]) so scatter-add restores W. """
    x,recon=as_array(W),as_array(W_bulk_recon)
    assert x.shape==recon.shape, f"Shape mismatch: {x.shape} vs {recon.shape}"
    _check_positions(outliers,x.shape)
    r,c=outliers.rows,outliers.cols
    resid=(x[r,c].astype(np.float64)-recon[r,c].astype(np.float64)).astype(np.float32)
    return dataclasses.replace(outliers,values=to_half(resid),residual=True)

def apply_outliers(recon: np.ndarray, outliers: OutlierSet, convention: str = 'add') -> np.ndarray:
    """ Scatters the outlier values onto a codebook reconstruction (returns a new binary32 array). """
    assert convention in RESIDUAL_CONVENTIONS, f"Unknown residual convention {convention}"
    out=np.array(recon,dtype=np.float32,copy=True)
    _check_positions(outliers,out.shape)
    vals=outliers.values.astype(np.float32)
    if convention=='add':
        out[outliers.rows,outliers.cols]+=vals
    else:
        out[outliers.rows,outliers.cols]=vals
    return out

def outlier_bytes(outliers: OutlierSet) -> int:
    return OUTLIER_TRIPLE_BYTES*len(outliers)
