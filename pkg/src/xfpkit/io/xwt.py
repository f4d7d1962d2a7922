# Raw tensor file (".xwt"), little-endian throughout:
#   bytes 0-3   magic b'XWT0'
#   bytes 4-7   u32 rows
#   bytes 8-11  u32 cols
#   bytes 12-15 u32 dtype tag (0 = binary32, 1 = binary16)
#   then rows*cols elements, row-major
import os
import struct
from typing import Union

import numpy as np

from xfpkit import XfpError
from xfpkit.quant.tensor import WeightMatrix, MatrixLike, as_array, to_half, half_from_bits
from xfpkit.util.logging import logger

XWT_MAGIC=b'XWT0'
XWT_HEADER=struct.Struct('<4sIII')
DTYPE_TAGS={0:np.dtype('<f4'),1:np.dtype('<u2')}

class XwtFormatError(XfpError, ValueError): pass


def xwt_to_bytes(W: MatrixLike, dtype_tag: int = 0) -> bytes:
    data=as_array(W)
    assert data.ndim==2
    if dtype_tag==0:
        payload=data.astype('<f4').tobytes()
    elif dtype_tag==1:
        payload=to_half(data).view(np.uint16).astype('<u2').tobytes()
    else:
        raise XwtFormatError(f"Unknown dtype tag {dtype_tag}")
    return XWT_HEADER.pack(XWT_MAGIC,data.shape[0],data.shape[1],dtype_tag)+payload

def xwt_from_bytes(b: bytes) -> WeightMatrix:
    if len(b)<XWT_HEADER.size:
        raise XwtFormatError(f"Only {len(b)} bytes, too short for an .xwt header")
    magic,rows,cols,tag=XWT_HEADER.unpack_from(b)
    if magic!=XWT_MAGIC:
        raise XwtFormatError(f"Bad magic {magic!r}, expected {XWT_MAGIC!r}")
    if tag not in DTYPE_TAGS:
        raise XwtFormatError(f"Unknown dtype tag {tag}")
    dt=DTYPE_TAGS[tag]
    if len(b)!=XWT_HEADER.size+rows*cols*dt.itemsize:
        raise XwtFormatError(f"Payload is {len(b)-XWT_HEADER.size} bytes, expected {rows*cols*dt.itemsize}")
    arr=np.frombuffer(b,dtype=dt,offset=XWT_HEADER.size).reshape(rows,cols)
    if tag==1: arr=half_from_bits(arr).astype(np.float32)
    return WeightMatrix(arr)

def write_xwt(W: MatrixLike, path: Union[str,os.PathLike], dtype_tag: int = 0):
    with open(path,'wb') as f:
        f.write(xwt_to_bytes(W,dtype_tag=dtype_tag))
    logger.debug(f"Wrote {str(path)}")

def read_xwt(path: Union[str,os.PathLike]) -> WeightMatrix:
    logger.debug(f"Reading {str(path)}")
    with open(path,'rb') as f:
        return xwt_from_bytes(f.read())
