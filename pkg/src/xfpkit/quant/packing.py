import argparse
import dataclasses
import json
from typing import Optional

import numpy as np

from xfpkit import XfpError

WARP_SIZE=32
# Wider lookup tables than the warp-wide budget allows; never admissible for V2a
V2A_EXCLUDED_BITS=(5,6)

class PackingError(XfpError, ValueError): pass
class CorruptPackingError(XfpError, ValueError): pass


@dataclasses.dataclass(frozen=True)
class PackingScheme:
    n_bits: int
    values_per_word: int
    word_bits: int
    used_bits: int
    reserve_bits: int

    def __post_init__(self):
        assert self.used_bits==self.n_bits*self.values_per_word
        assert self.used_bits+self.reserve_bits==self.word_bits

    @property
    def word_dtype(self) -> np.dtype:
        return np.dtype('<u4') if self.word_bits==32 else np.dtype('<u2')

    @property
    def bits_per_weight(self) -> float:
        return self.word_bits/self.values_per_word

    def word_count(self, element_count: int) -> int:
        return -(-element_count//self.values_per_word)

SCHEMES: dict[int,PackingScheme]={s.n_bits:s for s in [
    PackingScheme(n_bits=2,values_per_word=16,word_bits=32,used_bits=32,reserve_bits=0),
    PackingScheme(n_bits=3,values_per_word=10,word_bits=32,used_bits=30,reserve_bits=2),
    PackingScheme(n_bits=4,values_per_word=8, word_bits=32,used_bits=32,reserve_bits=0),
    PackingScheme(n_bits=5,values_per_word=3, word_bits=16,used_bits=15,reserve_bits=1),
    PackingScheme(n_bits=6,values_per_word=5, word_bits=32,used_bits=30,reserve_bits=2),
]}

def get_scheme(n_bits: int) -> PackingScheme:
    try: return SCHEMES[n_bits]
    except KeyError:
        raise PackingError(f"No packing scheme for N={n_bits}, options are {sorted(SCHEMES)}") from None


@dataclasses.dataclass(frozen=True,eq=False)
class PackedIndices:
    words: np.ndarray
    scheme: PackingScheme
    element_count: int
    shape: tuple[int,int]

    @property
    def nbytes(self) -> int:
        return len(self.words)*self.scheme.word_bits//8


def pack(indices: np.ndarray, n_bits: int) -> PackedIndices:
    """ Packs an index matrix row-major into words; slot s of a word holds bits [s*N, (s+1)*N).

    The final word is zero-padded and reserve bits are always zero.
    """
    scheme=get_scheme(n_bits)
    idx=np.asarray(indices)
    shape=tuple(idx.shape)
    flat=idx.ravel().astype(np.int64)
    if len(flat) and (flat.min()<0 or flat.max()>=2**n_bits):
        raise PackingError(f"Index out of range for N={n_bits}: [{flat.min()}, {flat.max()}]")
    vpw=scheme.values_per_word
    padded=np.zeros(scheme.word_count(len(flat))*vpw,dtype=np.uint64)
    padded[:len(flat)]=flat
    shifts=(np.arange(vpw,dtype=np.uint64)*np.uint64(n_bits))
    words=np.bitwise_or.reduce(padded.reshape(-1,vpw)<<shifts,axis=1) if len(padded) \
        else np.empty(0,dtype=np.uint64)
    return PackedIndices(words=words.astype(scheme.word_dtype),scheme=scheme,element_count=len(flat),shape=shape)

def unpack(packed: PackedIndices) -> np.ndarray:
    """ Inverse of pack(). Nonzero reserve bits or padding slots mean the words are corrupt. """
    scheme=packed.scheme
    words=np.asarray(packed.words).astype(np.uint64)
    if len(words)!=scheme.word_count(packed.element_count):
        raise CorruptPackingError(f"{len(words)} words cannot hold exactly {packed.element_count} indices")
    if scheme.reserve_bits and np.any(words>>np.uint64(scheme.used_bits)):
        raise CorruptPackingError(f"Nonzero reserve bits in N={scheme.n_bits} packed words")
    vpw=scheme.values_per_word
    shifts=(np.arange(vpw,dtype=np.uint64)*np.uint64(scheme.n_bits))
    slots=((words[:,None]>>shifts)&np.uint64(2**scheme.n_bits-1)).ravel()
    if np.any(slots[packed.element_count:]):
        raise CorruptPackingError("Nonzero padding slots after the last index")
    return slots[:packed.element_count].astype(np.uint8).reshape(packed.shape)


@dataclasses.dataclass(frozen=True)
class LaneGeometry:
    n_bits: int
    group_size: int
    admissible: bool
    lanes_per_group: Optional[int] = None
    cb_per_iter: Optional[int] = None
    reason: str = ''

def v2a_lane_geometry(n_bits: int, group_size: int, warp_size: int = WARP_SIZE) -> LaneGeometry:
    """ Whether the shared-library decode can walk groups of ``group_size`` at width N.

    Admissible iff group_size divides into whole words, the resulting lanes per group
    divide the warp, and N is not one of the widths excluded by the lookup-table budget.
    """
    scheme=get_scheme(n_bits)
    vpw=scheme.values_per_word
    verdict=lambda reason: LaneGeometry(n_bits=n_bits,group_size=group_size,admissible=False,reason=reason)
    if n_bits in V2A_EXCLUDED_BITS:
        return verdict(f"N={n_bits} exceeds the warp-wide lookup-table budget")
    if group_size<vpw or group_size%vpw:
        return verdict(f"{group_size} mod {vpw} != 0")
    lanes=group_size//vpw
    if lanes>warp_size or warp_size%lanes:
        return verdict(f"{warp_size} mod {lanes} != 0")
    return LaneGeometry(n_bits=n_bits,group_size=group_size,admissible=True,
                        lanes_per_group=lanes,cb_per_iter=warp_size//lanes)

def v2a_admissible_bits(group_size: int) -> list[int]:
    return [n for n in sorted(SCHEMES) if v2a_lane_geometry(n,group_size).admissible]

def cli_geometry(*args):
    parser=argparse.ArgumentParser(description='Checks V2a lane geometry for a bit width and group size')
    parser.add_argument('n_bits',type=int,help='Index bit width N')
    parser.add_argument('group_size',type=int,nargs='?',default=128,help='Weights per group (default 128)')
    namespace=parser.parse_args(args)
    geo=v2a_lane_geometry(namespace.n_bits,namespace.group_size)
    print(json.dumps(dataclasses.asdict(geo)))
