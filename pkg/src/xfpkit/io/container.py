# Quantized model container (".xfpq"), little-endian throughout:
#   file header   4s magic b'XFPQ', u16 version, u16 layer count
#   per layer     u64 body length, body, u32 CRC32 of body
#   body          u16 name length, utf-8 name, fixed LAYER_HEADER, then sections in order:
#                   codebooks    codebook_count x 2^N u16 halves (V2: one per row, V2a: the library)
#                   assignments  group_count u8 library index, group_count u16 scale, group_count u16 mid
#                   packed words word_count x u32 (u16 for N=5)
#                   outliers     outlier_count x (i64 row, i64 col, u16 half)
import argparse
import dataclasses
import json
import os
import struct
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Union, Sequence, Callable

import numpy as np
import pandas as pd

from xfpkit import XfpError
from xfpkit.io.xwt import read_xwt, write_xwt
from xfpkit.quant.autoselect import LayerClass, Mode, QualityPolicy
from xfpkit.quant.layer import QuantizedLayer, LayerFormatError, EffectiveBits, encode_layer, encode_expert_group,\
    decode_layer, effective_bits, reconstruction_table, summarize_reconstruction
from xfpkit.quant.library import CodebookLibrary, GroupAssignment, group_count
from xfpkit.quant.lloyd import ChannelCodebookSet
from xfpkit.quant.outlier import OutlierSet
from xfpkit.quant.packing import PackedIndices, get_scheme
from xfpkit.quant.tensor import half_from_bits
from xfpkit.util.conf import CliConfig
from xfpkit.util.logging import logger, time_it

XFPQ_MAGIC=b'XFPQ'
CONTAINER_VERSION=1
FILE_HEADER=struct.Struct('<4sHH')
RECORD_LENGTH=struct.Struct('<Q')
NAME_LENGTH=struct.Struct('<H')
CRC=struct.Struct('<I')
# mode, N, class, flags, rows, cols, group_size, codebook_count, group_count, word_count, outlier_count, k, cap, mu, sigma
LAYER_HEADER=struct.Struct('<BBBBIIIQQQQdddd')
OUTLIER_DTYPE=np.dtype([('row','<i8'),('col','<i8'),('value','<u2')])

FLAG_OVERWRITE=0x1
FLAG_COLUMN_GROUPS=0x2

MODE_CODES=[Mode.V2,Mode.V2A]
CLASS_CODES=list(LayerClass)

class ContainerError(XfpError, ValueError): pass
class BadMagicError(ContainerError): pass
class VersionMismatchError(ContainerError): pass
class TruncatedContainerError(ContainerError): pass
class ChecksumError(ContainerError): pass
class ClassMapError(XfpError, KeyError): pass


def _layer_body(layer: QuantizedLayer) -> bytes:
    name=layer.name.encode('utf-8')
    flags=(FLAG_OVERWRITE if layer.residual_convention=='overwrite' else 0)\
          |(FLAG_COLUMN_GROUPS if layer.orientation=='column' else 0)
    if layer.mode==Mode.V2:
        codebooks=layer.codebooks.codebooks
        lib_idx=scale=mid=np.empty(0,np.float16)
    else:
        codebooks=layer.library.entries
        lib_idx,scale,mid=layer.assignment.library_index,layer.assignment.scale,layer.assignment.mid
    o=layer.outliers
    triples=np.empty(len(o),dtype=OUTLIER_DTYPE)
    triples['row'],triples['col'],triples['value']=o.rows,o.cols,o.values.view(np.uint16)
    header=LAYER_HEADER.pack(MODE_CODES.index(layer.mode),layer.n_bits,CLASS_CODES.index(layer.layer_class),flags,
                             layer.rows,layer.cols,layer.group_size,codebooks.shape[0],np.size(lib_idx),
                             len(layer.packed.words),len(o),o.k,o.cap_fraction,o.mu_used,o.sigma_used)
    return b''.join([NAME_LENGTH.pack(len(name)),name,header,
                     codebooks.view(np.uint16).astype('<u2').tobytes(),
                     np.asarray(lib_idx,dtype=np.uint8).tobytes(),
                     np.asarray(scale).view(np.uint16).astype('<u2').tobytes(),
                     np.asarray(mid).view(np.uint16).astype('<u2').tobytes(),
                     layer.packed.words.astype(layer.packed.scheme.word_dtype).tobytes(),
                     triples.tobytes()])

def model_to_bytes(layers: Sequence[QuantizedLayer]) -> bytes:
    parts=[FILE_HEADER.pack(XFPQ_MAGIC,CONTAINER_VERSION,len(layers))]
    for layer in layers:
        body=_layer_body(layer)
        parts+=[RECORD_LENGTH.pack(len(body)),body,CRC.pack(zlib.crc32(body))]
    return b''.join(parts)


class _Reader:
    def __init__(self, b: bytes, what: str):
        self.b,self.pos,self.what=b,0,what

    def take(self, n: int) -> bytes:
        if self.pos+n>len(self.b):
            raise TruncatedContainerError(f"{self.what} ends after {len(self.b)-self.pos} of {n} expected bytes")
        chunk=self.b[self.pos:self.pos+n]
        self.pos+=n
        return chunk

    def unpack(self, s: struct.Struct) -> tuple:
        return s.unpack(self.take(s.size))

    def array(self, dtype, count: int) -> np.ndarray:
        dtype=np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize*count),dtype=dtype).copy()

def _layer_from_body(body: bytes) -> QuantizedLayer:
    r=_Reader(body,"Layer record")
    name=r.take(r.unpack(NAME_LENGTH)[0]).decode('utf-8')
    mode_c,n_bits,class_c,flags,rows,cols,gsize,n_cb,n_groups,n_words,n_out,k,cap,mu,sigma=r.unpack(LAYER_HEADER)
    if mode_c>=len(MODE_CODES) or class_c>=len(CLASS_CODES):
        raise LayerFormatError(f"Layer '{name}': unknown mode code {mode_c} or class code {class_c}")
    mode,layer_class=MODE_CODES[mode_c],CLASS_CODES[class_c]
    convention='overwrite' if flags&FLAG_OVERWRITE else 'add'
    orientation='column' if flags&FLAG_COLUMN_GROUPS else 'row'
    try:
        scheme=get_scheme(n_bits)
    except XfpError as e:
        raise LayerFormatError(f"Layer '{name}': {e}") from e
    if n_words!=scheme.word_count(rows*cols):
        raise LayerFormatError(f"Layer '{name}': {n_words} packed words for a {rows}x{cols} matrix at N={n_bits}")

    cb=half_from_bits(r.array('<u2',n_cb*2**n_bits)).reshape(n_cb,2**n_bits)
    lib_idx=r.array('<u1',n_groups)
    scale=half_from_bits(r.array('<u2',n_groups))
    mid=half_from_bits(r.array('<u2',n_groups))
    words=r.array(scheme.word_dtype,n_words)
    triples=r.array(OUTLIER_DTYPE,n_out)
    if r.pos!=len(body):
        raise LayerFormatError(f"Layer '{name}': {len(body)-r.pos} unexpected trailing bytes")

    outliers=OutlierSet(rows=triples['row'],cols=triples['col'],values=half_from_bits(triples['value']),
                        k=k,cap_fraction=cap,mu_used=mu,sigma_used=sigma,residual=(convention=='add'))
    packed=PackedIndices(words=words,scheme=scheme,element_count=rows*cols,shape=(rows,cols))
    try:
        if mode==Mode.V2:
            payload=dict(codebooks=ChannelCodebookSet(cb,n_bits=n_bits))
        else:
            channels,per_channel=(rows,cols) if orientation=='row' else (cols,rows)
            if gsize<1 or n_groups!=channels*group_count(per_channel,gsize):
                raise LayerFormatError(f"Layer '{name}': {n_groups} groups do not tile {rows}x{cols} at size {gsize}")
            shape=(channels,group_count(per_channel,gsize))
            payload=dict(library=CodebookLibrary(cb,n_bits=n_bits),
                         assignment=GroupAssignment(library_index=lib_idx.reshape(shape),scale=scale.reshape(shape),
                                                    mid=mid.reshape(shape),group_size=gsize,orientation=orientation))
    except AssertionError as e:
        raise LayerFormatError(f"Layer '{name}': invalid codebook payload ({e})") from e
    return QuantizedLayer(name=name,mode=mode,n_bits=n_bits,shape=(rows,cols),layer_class=layer_class,
                          packed=packed,outliers=outliers,residual_convention=convention,**payload)

def model_from_bytes(b: bytes) -> list[QuantizedLayer]:
    r=_Reader(b,"Container")
    magic,version,n_layers=r.unpack(FILE_HEADER)
    if magic!=XFPQ_MAGIC:
        raise BadMagicError(f"Bad magic {magic!r}, expected {XFPQ_MAGIC!r}")
    if version!=CONTAINER_VERSION:
        raise VersionMismatchError(f"Container version {version}, this reader handles {CONTAINER_VERSION}")
    layers=[]
    for i in range(n_layers):
        body=r.take(r.unpack(RECORD_LENGTH)[0])
        stored,=r.unpack(CRC)
        if (actual:=zlib.crc32(body))!=stored:
            logger.error(f"Checksum mismatch in layer record {i}: stored {stored:08x}, computed {actual:08x}")
            raise ChecksumError(f"Layer record {i} fails its CRC32 check")
        layers.append(_layer_from_body(body))
    if r.pos!=len(b):
        raise ContainerError(f"{len(b)-r.pos} trailing bytes after {n_layers} layer records")
    return layers

def save_model(layers: Sequence[QuantizedLayer], path: Union[str,os.PathLike]):
    b=model_to_bytes(layers)
    with time_it(f"Writing {path}"):
        Path(path).write_bytes(b)
    logger.info(f"Wrote {len(layers)} layers ({len(b)} bytes) to {path}")

def load_model(path: Union[str,os.PathLike]) -> list[QuantizedLayer]:
    with time_it(f"Reading {path}"):
        layers=model_from_bytes(Path(path).read_bytes())
    logger.info(f"Read {len(layers)} layers from {path}")
    return layers


def model_effective_bits(layers: Sequence[QuantizedLayer]) -> EffectiveBits:
    """ Parameter-weighted effective bits over a set of layers. """
    numel=sum(l.numel for l in layers)
    if not numel: return EffectiveBits(0.0,0.0,0.0)
    parts=np.sum([np.array(dataclasses.astuple(effective_bits(l)))*l.numel for l in layers],axis=0)/numel
    return EffectiveBits(*[float(p) for p in parts])

def class_histogram(layers: Sequence[QuantizedLayer]) -> dict[str,dict[str,int]]:
    hist={}
    for l in layers:
        counts=hist.setdefault(l.layer_class.value,{})
        counts[str(l.n_bits)]=counts.get(str(l.n_bits),0)+1
    return {c:dict(sorted(h.items())) for c,h in sorted(hist.items())}

def layer_summary(layer: QuantizedLayer) -> dict:
    summary={'name':layer.name,'class':layer.layer_class.value,'mode':layer.mode.value,'n_bits':layer.n_bits,
             'shape':list(layer.shape),'outlier_count':len(layer.outliers),
             'effective_bits':effective_bits(layer).to_dict()}
    if layer.library is not None:
        summary['library']={'size':layer.library.size,'group_size':layer.group_size,'orientation':layer.orientation,
                            'duplicate_centroids':layer.library.duplicate_centroids}
    if layer.report is not None:
        summary['autoselect']=layer.report.to_dict()
    return summary


def _collect_xwt(inputs: Sequence[str]) -> dict[str,Path]:
    files={}
    for inp in inputs:
        p=Path(inp)
        for f in (sorted(p.glob('*.xwt')) if p.is_dir() else [p]):
            if f.stem in files:
                raise ContainerError(f"Two inputs share the layer name '{f.stem}': {files[f.stem]} and {f}")
            files[f.stem]=f
    return files

def read_class_map(path) -> tuple[dict[str,LayerClass],dict[str,list[str]]]:
    """ Reads a class-map sidecar, either {name: class} or {"layers": {...}, "moe_groups": {group: [names]}}. """
    with open(path) as f:
        raw=json.load(f)
    layers=raw.get('layers',{}) if 'layers' in raw or 'moe_groups' in raw else raw
    return {n:LayerClass.parse(c) for n,c in layers.items()}, {g:list(m) for g,m in raw.get('moe_groups',{}).items()}

def quantize_files(files: dict[str,Path], classes: dict[str,LayerClass], moe_groups: dict[str,list[str]],
                   policy: QualityPolicy, mode: Mode, jobs: int = 1) -> list[QuantizedLayer]:
    """ Encodes every named file; members of an MoE group share the width picked from a sample of the group. """
    grouped={n for members in moe_groups.values() for n in members}
    if missing:=sorted(grouped-set(files)):
        raise ClassMapError(f"MoE group members without an input file: {missing}")
    if unclassed:=sorted(n for n in files if n not in classes and n not in grouped):
        raise ClassMapError(f"No layer class for {unclassed}; give a class map entry or --default-class")

    tasks: list[Callable[[],list[QuantizedLayer]]]=[]
    for g,members in moe_groups.items():
        tasks.append(lambda members=members: encode_expert_group([(n,read_xwt(files[n])) for n in members],policy,mode))
    for n,f in files.items():
        if n in grouped: continue
        tasks.append(lambda n=n,f=f: [encode_layer(read_xwt(f),classes[n],policy,mode,name=n)])
    if jobs>1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            results=list(executor.map(lambda t: t(),tasks))
    else:
        results=[t() for t in tasks]
    by_name={l.name:l for r in results for l in r}
    return [by_name[n] for n in files]

def cli_quantize(*args):
    parser=argparse.ArgumentParser(description='Quantizes .xwt weight matrices into an .xfpq container')
    parser.add_argument('inputs',nargs='+',help='.xwt files, or directories holding them; layer name = file stem')
    parser.add_argument('-o','--output',required=True,help='Container to write')
    parser.add_argument('--class-map',help='JSON sidecar mapping layer names to layer classes')
    parser.add_argument('--default-class',choices=[c.value for c in LayerClass],
                        help='Class for layers missing from the class map')
    parser.add_argument('--mode',choices=[m.value for m in Mode],default='v2',help='Storage mode (default v2)')
    parser.add_argument('--residual',choices=['add','overwrite'],default='add',help='Outlier residual convention')
    parser.add_argument('--orientation',choices=['row','column'],default='row',help='V2a group orientation')
    parser.add_argument('--report',help='Write the JSON report here instead of to stdout')
    CliConfig.add_arguments(parser)
    namespace=parser.parse_args(args)
    conf=CliConfig.from_namespace(namespace)
    policy=conf.policy(residual_convention=namespace.residual,group_orientation=namespace.orientation)
    mode=Mode.parse(namespace.mode)

    files=_collect_xwt(namespace.inputs)
    classes,moe_groups=read_class_map(namespace.class_map) if namespace.class_map else ({},{})
    if namespace.default_class:
        classes={**{n:LayerClass.parse(namespace.default_class) for n in files},**classes}
    layers=quantize_files(files,classes,moe_groups,policy,mode,jobs=conf['XFP_JOBS'])
    save_model(layers,namespace.output)

    report={'schema_version':CONTAINER_VERSION,'container':str(namespace.output),'mode':mode.value,
            'policy':dataclasses.asdict(policy),'layers':[layer_summary(l) for l in layers],
            'effective_bits':model_effective_bits(layers).to_dict(),'class_histogram':class_histogram(layers)}
    _emit_json(report,namespace.report)

def cli_dequantize(*args):
    parser=argparse.ArgumentParser(description='Decodes every layer of an .xfpq container to .xwt files')
    parser.add_argument('container',help='Container to read')
    parser.add_argument('-o','--out-dir',required=True,help='Directory for the <layer>.xwt files')
    parser.add_argument('--half',action='store_true',help='Write binary16 payloads instead of binary32')
    CliConfig.add_arguments(parser,policy=False)
    namespace=parser.parse_args(args)
    CliConfig.from_namespace(namespace)

    out_dir=Path(namespace.out_dir)
    out_dir.mkdir(parents=True,exist_ok=True)
    written=[]
    for layer in load_model(namespace.container):
        path=out_dir/f"{layer.name}.xwt"
        write_xwt(decode_layer(layer),path,dtype_tag=1 if namespace.half else 0)
        written.append({'name':layer.name,'path':str(path)})
    _emit_json({'schema_version':CONTAINER_VERSION,'layers':written},None)

def model_report(layers: Sequence[QuantizedLayer], originals: dict = None) -> dict:
    report={'schema_version':CONTAINER_VERSION,
            'layers':[layer_summary(l) for l in layers],
            'effective_bits':model_effective_bits(layers).to_dict(),
            'class_histogram':class_histogram(layers)}
    if originals is not None:
        table=reconstruction_table(layers,originals)
        report['reconstruction']={'layers':table.to_dict(orient='records'),
                                  'classes':summarize_reconstruction(table).to_dict(orient='records')}
    return report

def _format_report(report: dict) -> str:
    lines=[]
    table=pd.DataFrame([{'layer':l['name'],'class':l['class'],'mode':l['mode'],'N':l['n_bits'],
                         'shape':'x'.join(map(str,l['shape'])),'outliers':l['outlier_count'],
                         'bits':l['effective_bits']['total'],
                         'bits w/o outliers':l['effective_bits']['total_without_outliers']}
                        for l in report['layers']])
    lines.append(table.to_string(index=False,float_format=lambda x: f"{x:.4f}") if len(table) else "(no layers)")
    eb=report['effective_bits']
    lines.append(f"\nEffective bits: {eb['total']:.4f} with outliers, {eb['total_without_outliers']:.4f} without")
    lines.append("\nBit widths per class:")
    for c,hist in report['class_histogram'].items():
        lines.append(f"  {c}: "+", ".join(f"N={n} x{cnt}" for n,cnt in hist.items()))
    if 'reconstruction' in report:
        lines.append("\nReconstruction (cos bulk = codebook-only):")
        classes=pd.DataFrame(report['reconstruction']['classes'])
        lines.append(classes.to_string(index=False,float_format=lambda x: f"{x:.5f}") if len(classes) else "(no originals matched)")
    return "\n".join(lines)

def cli_report(*args):
    parser=argparse.ArgumentParser(description='Summarizes an .xfpq container')
    parser.add_argument('container',help='Container to read')
    parser.add_argument('--originals',help='Directory of <layer>.xwt originals for the reconstruction table')
    parser.add_argument('--format',choices=['text','json'],default='text',help='Output format (default text)')
    CliConfig.add_arguments(parser,policy=False)
    namespace=parser.parse_args(args)
    CliConfig.from_namespace(namespace)

    layers=load_model(namespace.container)
    originals=None
    if namespace.originals:
        originals={l.name:read_xwt(p) for l in layers if (p:=Path(namespace.originals)/f"{l.name}.xwt").exists()}
    report=model_report(layers,originals)
    if namespace.format=='json': _emit_json(report,None)
    else: print(_format_report(report))

def _emit_json(obj: dict, path):
    text=json.dumps(obj,indent=2,default=lambda o: o.item() if hasattr(o,"item") else str(o))
    if path:
        Path(path).write_text(text)
        logger.info(f"Wrote report to {path}")
    else:
        sys.stdout.write(text+"\n")
