import dataclasses
import warnings

import numpy as np
from scipy.cluster.vq import kmeans2

from xfpkit.quant.lloyd import ChannelCodebookSet, nearest_index, DEFAULT_MOE_LLOYD_ITERS
from xfpkit.quant.tensor import to_half
from xfpkit.util.logging import logger, time_it

DEFAULT_LIBRARY_SIZE=32
DEFAULT_GROUP_SIZE=128
# 5 bits suffice for L=32 but each assignment is stored byte-aligned, next to a half scale and a half mid
ASSIGNMENT_BITS_ON_DISK=8
GROUP_PARAM_BITS=ASSIGNMENT_BITS_ON_DISK+16+16
GROUP_ORIENTATIONS=('row','column')


@dataclasses.dataclass(frozen=True,eq=False)
class CodebookLibrary:
    """ L shared codebooks of 2^N normalized binary16 entries, each sorted ascending. """
    entries: np.ndarray
    n_bits: int

    def __post_init__(self):
        entries=to_half(self.entries)
        assert entries.ndim==2 and entries.shape[1]==2**self.n_bits, \
            f"Expected (L, {2**self.n_bits}) library entries, got {entries.shape}"
        assert np.all(np.diff(entries.astype(np.float32),axis=1)>=0), "Library entries must be sorted"
        object.__setattr__(self,'entries',entries)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def byte_size(self) -> int:
        return self.entries.size*2

    @property
    def duplicate_centroids(self) -> int:
        """ Entries that repeat an earlier entry bit for bit. """
        return self.size-len(np.unique(self.entries.view(np.uint16),axis=0))


@dataclasses.dataclass(frozen=True,eq=False)
class GroupAssignment:
    """ Per-group library choice and affine map, decode contract w = scale*entry[idx] + mid.

    Arrays are (channels, groups per channel), where channels are rows of W for 'row'
    orientation and columns of W for 'column' orientation. The last group of a channel may be short.
    """
    library_index: np.ndarray
    scale: np.ndarray
    mid: np.ndarray
    group_size: int
    orientation: str = 'row'

    def __post_init__(self):
        assert self.orientation in GROUP_ORIENTATIONS, f"Unknown group orientation {self.orientation}"
        object.__setattr__(self,'library_index',np.asarray(self.library_index,dtype=np.uint8))
        object.__setattr__(self,'scale',to_half(self.scale))
        object.__setattr__(self,'mid',to_half(self.mid))
        assert self.library_index.shape==self.scale.shape==self.mid.shape

    def __len__(self):
        return self.library_index.size


def group_count(cols: int, group_size: int) -> int:
    return -(-cols//group_size)

def normalize_codebooks(codebooks: np.ndarray) -> np.ndarray:
    """ Zero-mean, unit max-absolute-deviation rows; rows with no spread become zero vectors. """
    c=np.asarray(codebooks,dtype=np.float64)
    dev=c-c.mean(axis=1,keepdims=True)
    spread=np.abs(dev).max(axis=1,keepdims=True)
    return np.where(spread>0,dev/np.where(spread>0,spread,1),0.0)

def _farthest_point_seeds(P: np.ndarray, n: int) -> list[int]:
    chosen=[0]
    mind=((P-P[0])**2).sum(axis=1)
    for _ in range(1,n):
        j=int(np.argmax(mind))
        chosen.append(j)
        mind=np.minimum(mind,((P-P[j])**2).sum(axis=1))
    return chosen

def libfit(channel_codebooks: ChannelCodebookSet, L: int = DEFAULT_LIBRARY_SIZE,
           iters: int = DEFAULT_MOE_LLOYD_ITERS) -> CodebookLibrary:
    """ Condenses per-channel codebooks into a library of L normalized codebooks.

    k-means in 2^N dimensions over the normalized source codebooks, seeded by farthest-point
    selection starting from the first channel, empty clusters keep their centroid.
    """
    assert len(channel_codebooks)>=1, "LibFit needs at least one source codebook"
    assert L>=1
    P=normalize_codebooks(channel_codebooks.codebooks)
    with time_it(f"LibFit of {len(P)} codebooks into L={L}",threshold_time=.5):
        C=P[_farthest_point_seeds(P,L)].copy()
        if iters>0:
            # empty clusters keep their centroid; the duplicates they leave are counted below
            with warnings.catch_warnings():
                warnings.simplefilter('ignore',UserWarning)
                C,_=kmeans2(P,C,iter=iters,minit='matrix',missing='warn')
    lib=CodebookLibrary(entries=np.sort(C,axis=1),n_bits=channel_codebooks.n_bits)
    if dups:=lib.duplicate_centroids:
        logger.warning(f"LibFit produced {dups} duplicate centroids"\
                       f" ({len(np.unique(P,axis=0))} distinct normalized codebooks for L={L})")
    return lib


def _select_entries(blocks: np.ndarray, E: np.ndarray):
    """ Picks the library entry minimizing post-affine SSE for each row of ``blocks``. """
    mid=blocks.mean(axis=1)
    dev=blocks-mid[:,None]
    scale=np.abs(dev).max(axis=1)
    flat=(scale==0)
    norm_scale=np.where(flat,1.0,scale)
    z=dev/norm_scale[:,None]

    best_sse=np.full(len(blocks),np.inf)
    best_l=np.zeros(len(blocks),dtype=np.uint8)
    best_idx=np.zeros(blocks.shape,dtype=np.uint8)
    for l,entry in enumerate(E):
        idx=nearest_index(z,entry)
        sse=((z-entry[idx])**2).sum(axis=1)*norm_scale**2
        # A flat group decodes exactly through scale 0 whatever the entry
        sse[flat]=0
        better=sse<best_sse
        best_sse[better]=sse[better]
        best_l[better]=l
        best_idx[better]=idx[better]
    return best_l, np.where(flat,0.0,scale), mid, best_idx

def assign_groups(bulk: np.ndarray, library: CodebookLibrary, group_size: int = DEFAULT_GROUP_SIZE,
                  orientation: str = 'row') -> tuple[GroupAssignment,np.ndarray]:
    """ Re-indexes every weight group against its best library entry.

    Per group the mid-point is the group mean and the scale the max absolute deviation from it;
    indices are nearest-neighbour in normalized space, and the entry with the smallest SSE after
    the affine map wins (ties to the lower library index).

    Returns:
        the GroupAssignment and the index matrix (same shape as bulk)
    """
    assert group_size>=1
    assert orientation in GROUP_ORIENTATIONS, f"Unknown group orientation {orientation}"
    x=np.asarray(bulk,dtype=np.float64)
    if orientation=='column': x=x.T
    R,C=x.shape
    nfull,tail=divmod(C,group_size)
    E=library.entries.astype(np.float64)

    parts=[]
    if nfull:
        l,s,m,ix=_select_entries(x[:,:nfull*group_size].reshape(R*nfull,group_size),E)
        parts.append((l.reshape(R,nfull),s.reshape(R,nfull),m.reshape(R,nfull),ix.reshape(R,nfull*group_size)))
    if tail:
        l,s,m,ix=_select_entries(x[:,nfull*group_size:],E)
        parts.append((l[:,None],s[:,None],m[:,None],ix))
    lib_idx,scale,mid,indices=(np.concatenate(p,axis=1) for p in zip(*parts))
    if orientation=='column': indices=indices.T
    return GroupAssignment(library_index=lib_idx,scale=scale,mid=mid,group_size=group_size,
                           orientation=orientation), np.ascontiguousarray(indices)

def decode_groups(indices: np.ndarray, assignment: GroupAssignment, library: CodebookLibrary) -> np.ndarray:
    """ scale*entry[idx] + mid for every weight, in binary32. """
    idx=np.asarray(indices)
    if assignment.orientation=='column': idx=idx.T
    gi=np.arange(idx.shape[1])//assignment.group_size
    lib_el=assignment.library_index[:,gi].astype(np.intp)
    vals=library.entries.astype(np.float32)[lib_el,idx.astype(np.intp)]
    out=assignment.scale.astype(np.float32)[:,gi]*vals+assignment.mid.astype(np.float32)[:,gi]
    return np.ascontiguousarray(out.T if assignment.orientation=='column' else out)
