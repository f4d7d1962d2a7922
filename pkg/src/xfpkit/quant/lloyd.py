import dataclasses

import numpy as np

from xfpkit.quant.tensor import ShapeMismatchError, to_half
from xfpkit.util.logging import logger, time_it

DEFAULT_LLOYD_ITERS=20
DEFAULT_MOE_LLOYD_ITERS=20

# Upper bound on the size of the temporary comparison arrays in nearest_index()
_CHUNK_ELEMS=1<<23


@dataclasses.dataclass(frozen=True,eq=False)
class ChannelCodebook:
    """ 2^N binary16 entries for one output channel, sorted ascending. """
    entries: np.ndarray
    sse_history: tuple[float,...] = ()

    def __post_init__(self):
        entries=to_half(self.entries)
        assert np.isfinite(entries).all(), "Codebook entries must be finite"
        assert np.all(np.diff(entries.astype(np.float32))>=0), "Codebook entries must be sorted"
        object.__setattr__(self,'entries',entries)

    @property
    def size(self) -> int:
        return len(self.entries)


@dataclasses.dataclass(frozen=True,eq=False)
class ChannelCodebookSet:
    """ One ChannelCodebook per output channel, stored as a (rows, 2^N) binary16 array. """
    codebooks: np.ndarray
    n_bits: int

    def __post_init__(self):
        cbs=to_half(self.codebooks)
        assert cbs.ndim==2 and cbs.shape[1]==2**self.n_bits, \
            f"Expected (rows, {2**self.n_bits}) codebooks, got {cbs.shape}"
        assert np.isfinite(cbs).all(), "Codebook entries must be finite"
        assert np.all(np.diff(cbs.astype(np.float32),axis=1)>=0), "Codebook entries must be sorted"
        object.__setattr__(self,'codebooks',cbs)

    def __len__(self):
        return self.codebooks.shape[0]

    def __getitem__(self, i) -> ChannelCodebook:
        return ChannelCodebook(self.codebooks[i])

    def decode(self, indices: np.ndarray) -> np.ndarray:
        assert indices.shape[0]==len(self), f"{indices.shape[0]} index rows for {len(self)} codebooks"
        return np.take_along_axis(self.codebooks.astype(np.float32),indices.astype(np.intp),axis=1)


def _first_of_run(entries: np.ndarray) -> np.ndarray:
    """ For sorted entries, maps each position to the lowest position holding the same value. """
    k=entries.shape[-1]
    starts=np.concatenate([np.ones(entries.shape[:-1]+(1,),bool),entries[...,1:]!=entries[...,:-1]],axis=-1)
    return np.maximum.accumulate(np.where(starts,np.arange(k),0),axis=-1)

def nearest_index(values: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """ Index of the nearest entry for every value, ties going to the lower index.

    Args:
        values - (R, C) array
        entries - sorted entries, either (K,) shared by all values or (R, K) one row per value row

    Returns:
        (R, C) uint8 array of indices
    """
    x=np.asarray(values,dtype=np.float64)
    e=np.asarray(entries,dtype=np.float64)
    # x is strictly past the midpoint of e[j], e[j+1] iff it is strictly closer to e[j+1]
    mids=(e[...,:-1]+e[...,1:])/2
    if e.ndim==1:
        idx=np.searchsorted(mids,x,side='left')
        idx=_first_of_run(e)[idx]
    else:
        assert e.shape[0]==x.shape[0], f"{e.shape[0]} codebooks for {x.shape[0]} rows"
        idx=np.empty(x.shape,dtype=np.intp)
        block=max(1,_CHUNK_ELEMS//max(1,x.shape[1]*mids.shape[1]))
        for start in range(0,x.shape[0],block):
            stop=start+block
            idx[start:stop]=(x[start:stop,:,None]>mids[start:stop,None,:]).sum(axis=-1)
        idx=np.take_along_axis(_first_of_run(e),idx,axis=1)
    return idx.astype(np.uint8)


def _quantile_init(x: np.ndarray, size: int) -> np.ndarray:
    # Hazen plotting positions: probability (j+0.5)/size, linear between order statistics
    probs=(np.arange(size)+0.5)/size
    return np.quantile(x,probs,axis=1,method='hazen').T

def _lloyd_rows(x: np.ndarray, centroids: np.ndarray, iters: int) -> tuple[np.ndarray,np.ndarray]:
    """ Lloyd iteration on every row of x independently.

    Empty cells keep their previous centroid. Returns the final (unrounded) centroids, sorted,
    and the (iters, rows) history of within-cluster SSE after each round.
    """
    nrows,k=centroids.shape
    offsets=(np.arange(nrows)*k)[:,None]
    c=np.sort(centroids,axis=1)
    history=np.empty((iters,nrows))
    for it in range(iters):
        idx=nearest_index(x,c).astype(np.intp)
        flat=(idx+offsets).ravel()
        sums=np.bincount(flat,weights=x.ravel(),minlength=nrows*k).reshape(nrows,k)
        counts=np.bincount(flat,minlength=nrows*k).reshape(nrows,k)
        with np.errstate(invalid='ignore',divide='ignore'):
            c=np.where(counts>0,sums/np.maximum(counts,1),c)
        history[it]=np.sum((x-np.take_along_axis(c,idx,axis=1))**2,axis=1)
        c=np.sort(c,axis=1)
    return c, history


def init_codebook(channel_values, size: int) -> ChannelCodebook:
    """ CDF-uniform initialisation: entry j is the empirical quantile at (j+0.5)/size. """
    x=np.asarray(channel_values,dtype=np.float64).ravel()
    assert len(x), "Cannot initialise a codebook from an empty channel"
    assert size>=2, f"Codebook size must be at least 2, got {size}"
    return ChannelCodebook(_quantile_init(x[None,:],size)[0])

def lloyd_fit(channel_values, size: int, iters: int = DEFAULT_LLOYD_ITERS) -> ChannelCodebook:
    """ Fits a scalar codebook to one channel: quantile init, then ``iters`` Lloyd rounds.

    Rounding to binary16 happens once, after the last round.
    """
    x=np.asarray(channel_values,dtype=np.float64).ravel()[None,:]
    assert x.size, "Cannot fit a codebook to an empty channel"
    assert iters>=0
    c,history=_lloyd_rows(x,_quantile_init(x,size),iters)
    return ChannelCodebook(np.sort(to_half(c[0]).astype(np.float32)),sse_history=tuple(history[:,0]))

def fit_channel_codebooks(bulk: np.ndarray, n_bits: int, iters: int = DEFAULT_LLOYD_ITERS) -> ChannelCodebookSet:
    """ Per-channel Lloyd codebooks for every row of the bulk matrix (V2). """
    x=np.asarray(bulk,dtype=np.float64)
    with time_it(f"Lloyd fit of {x.shape[0]} channels at N={n_bits}",threshold_time=.5):
        c,_=_lloyd_rows(x,_quantile_init(x,2**n_bits),iters)
    return ChannelCodebookSet(np.sort(to_half(c).astype(np.float32),axis=1),n_bits=n_bits)

def assign_indices(bulk: np.ndarray, cbs: ChannelCodebookSet) -> np.ndarray:
    """ Nearest codebook entry per element (ties to the lower index), as a uint8 index matrix. """
    x=np.asarray(bulk,dtype=np.float32)
    if x.shape[0]!=len(cbs):
        logger.error(f"{len(cbs)} codebooks cannot index a matrix of {x.shape[0]} rows")
        raise ShapeMismatchError(f"Shape mismatch: {x.shape[0]} rows vs {len(cbs)} codebooks")
    return nearest_index(x,cbs.codebooks.astype(np.float32))
