import json
import zlib

import numpy as np
import pytest

from xfpkit.io.container import model_to_bytes, model_from_bytes, save_model, load_model, model_effective_bits, \
    class_histogram, model_report, read_class_map, quantize_files, cli_quantize, cli_dequantize, cli_report, \
    BadMagicError, VersionMismatchError, TruncatedContainerError, ChecksumError, ContainerError, ClassMapError, \
    FILE_HEADER, RECORD_LENGTH
from xfpkit.io.xwt import write_xwt, read_xwt
from xfpkit.quant.autoselect import QualityPolicy, LayerClass, Mode
from xfpkit.quant.layer import encode_layer, decode_layer, LayerFormatError


def _random_model(seed: int):
    rng=np.random.default_rng(seed)
    layers=[]
    for i,(mode,n) in enumerate([(Mode.V2,2),(Mode.V2,3),(Mode.V2,5),(Mode.V2,6),(Mode.V2A,2),(Mode.V2A,4)]):
        rows,cols=int(rng.integers(2,9)),int(rng.integers(20,300))
        policy=QualityPolicy(residual_convention=str(rng.choice(['add','overwrite'])),
                             group_orientation=str(rng.choice(['row','column'])),group_size=32,library_size=8)
        W=rng.standard_t(3,size=(rows,cols))
        layers.append(encode_layer(W,list(LayerClass)[i%5],policy,mode,name=f"layer.{i}",n_bits=n))
    return layers

def _assert_same(a,b):
    assert (a.name,a.mode,a.n_bits,a.shape,a.layer_class,a.residual_convention,a.orientation)==\
           (b.name,b.mode,b.n_bits,b.shape,b.layer_class,b.residual_convention,b.orientation)
    assert np.array_equal(decode_layer(a).data.view(np.uint32),decode_layer(b).data.view(np.uint32))
    assert np.array_equal(a.packed.words,b.packed.words)
    assert np.array_equal(a.outliers.values.view(np.uint16),b.outliers.values.view(np.uint16))

def test_roundtrip_bit_exact():
    for seed in range(100):
        layers=_random_model(seed)
        b=model_to_bytes(layers)
        back=model_from_bytes(b)
        assert len(back)==len(layers)
        for a,c in zip(layers,back):
            _assert_same(a,c)
        assert model_to_bytes(back)==b

def test_save_load(tmp_path):
    layers=_random_model(99)
    save_model(layers,tmp_path/"m.xfpq")
    for a,b in zip(layers,load_model(tmp_path/"m.xfpq")):
        _assert_same(a,b)

def test_empty_model():
    assert model_from_bytes(model_to_bytes([]))==[]

def test_header_errors():
    b=model_to_bytes(_random_model(1)[:1])
    with pytest.raises(BadMagicError):
        model_from_bytes(b'XFPZ'+b[4:])
    with pytest.raises(VersionMismatchError):
        model_from_bytes(b[:4]+(2).to_bytes(2,'little')+b[6:])
    with pytest.raises(TruncatedContainerError):
        model_from_bytes(b[:-3])
    with pytest.raises(ContainerError):
        model_from_bytes(b+b'\x00')

def test_corruption_detected():
    b=bytearray(model_to_bytes(_random_model(2)))
    rng=np.random.default_rng(0)
    start=FILE_HEADER.size+RECORD_LENGTH.size
    for _ in range(20):
        c=b.copy()
        pos=int(rng.integers(start,start+100))
        c[pos]^=0x5A
        with pytest.raises(ChecksumError):
            model_from_bytes(bytes(c))

def test_consistent_crc_but_bad_body():
    layer=_random_model(3)[0]
    b=model_to_bytes([layer])
    body=b[FILE_HEADER.size+RECORD_LENGTH.size:-4]
    # Claim an unknown mode code, then re-seal the record
    name_len=int.from_bytes(body[:2],'little')
    bad=bytearray(body); bad[2+name_len]=9
    sealed=b[:FILE_HEADER.size+RECORD_LENGTH.size]+bytes(bad)+zlib.crc32(bytes(bad)).to_bytes(4,'little')
    with pytest.raises(LayerFormatError):
        model_from_bytes(sealed)

def test_summaries():
    layers=_random_model(4)
    hist=class_histogram(layers)
    assert sum(sum(h.values()) for h in hist.values())==len(layers)
    eb=model_effective_bits(layers)
    assert eb.total>=eb.total_without_outliers>0
    rep=model_report(layers,{l.name:decode_layer(l) for l in layers[:2]})
    assert len(rep['reconstruction']['layers'])==2
    json.dumps(rep,default=float)

def test_duplicate_centroids_reported_after_reload(tmp_path):
    W=np.random.default_rng(8).normal(size=(2,64))
    policy=QualityPolicy(library_size=8,group_size=32)
    layer=encode_layer(W,LayerClass.SHARED_EXPERT,policy,Mode.V2A,name='few',n_bits=2)
    # two source codebooks cannot fill eight library entries
    assert layer.library.duplicate_centroids>=6
    save_model([layer],tmp_path/"m.xfpq")
    back,=load_model(tmp_path/"m.xfpq")
    for l in [layer,back]:
        summary=model_report([l])['layers'][0]['library']
        assert summary=={'size':8,'group_size':32,'orientation':'row','duplicate_centroids':layer.library.duplicate_centroids}
    v2=encode_layer(W,LayerClass.SHARED_EXPERT,policy,Mode.V2,n_bits=2)
    assert 'library' not in model_report([v2])['layers'][0]

def test_class_map_forms(tmp_path):
    (tmp_path/"flat.json").write_text(json.dumps({'a':'lm_head'}))
    (tmp_path/"nested.json").write_text(json.dumps({'layers':{'a':'lm_head'},'moe_groups':{'g':['e0','e1']}}))
    assert read_class_map(tmp_path/"flat.json")==({'a':LayerClass.LM_HEAD},{})
    assert read_class_map(tmp_path/"nested.json")==({'a':LayerClass.LM_HEAD},{'g':['e0','e1']})

def test_quantize_files_needs_classes(tmp_path):
    write_xwt(np.ones((2,16)),tmp_path/"a.xwt")
    with pytest.raises(ClassMapError):
        quantize_files({'a':tmp_path/"a.xwt"},{},{},QualityPolicy(),Mode.V2)
    with pytest.raises(ClassMapError):
        quantize_files({'a':tmp_path/"a.xwt"},{'a':LayerClass.LM_HEAD},{'g':['missing']},QualityPolicy(),Mode.V2)

def test_quantize_dequantize_report_commands(tmp_path,capsys):
    rng=np.random.default_rng(5)
    src=tmp_path/"src"; src.mkdir()
    W={'attn':rng.standard_t(4,size=(8,128)),'const':np.full((4,64),0.5)}
    for i in range(6):
        W[f"e{i}"]=rng.normal(size=(4,128))
    for name,w in W.items():
        write_xwt(w,src/f"{name}.xwt")
    (tmp_path/"classes.json").write_text(json.dumps({'layers':{'attn':'self_attention','const':'lm_head'},
                                                     'moe_groups':{'experts':[f"e{i}" for i in range(6)]}}))
    out=tmp_path/"m.xfpq"
    cli_quantize(str(src),'-o',str(out),'--class-map',str(tmp_path/"classes.json"),'--jobs','2')
    report=json.loads(capsys.readouterr().out)
    by_name={l['name']:l for l in report['layers']}
    assert set(by_name)==set(W)
    assert by_name['const']['n_bits']==2 and by_name['const']['autoselect']['candidate_cos']['2']==1.0
    assert len({by_name[f"e{i}"]['n_bits'] for i in range(6)})==1

    cli_dequantize(str(out),'-o',str(tmp_path/"dec"))
    capsys.readouterr()
    layers={l.name:l for l in load_model(out)}
    for name in W:
        assert np.array_equal(read_xwt(tmp_path/"dec"/f"{name}.xwt").data,decode_layer(layers[name]).data)

    cli_report(str(out),'--originals',str(src),'--format','json')
    rep=json.loads(capsys.readouterr().out)
    assert len(rep['reconstruction']['layers'])==len(W)
    cli_report(str(out))
    assert 'Effective bits' in capsys.readouterr().out

def test_quantize_is_deterministic(tmp_path,capsys):
    write_xwt(np.random.default_rng(6).normal(size=(8,128)),tmp_path/"w.xwt")
    for name in ['a.xfpq','b.xfpq']:
        cli_quantize(str(tmp_path/"w.xwt"),'-o',str(tmp_path/name),'--default-class','shared_expert','--mode','v2a')
    capsys.readouterr()
    assert (tmp_path/"a.xfpq").read_bytes()==(tmp_path/"b.xfpq").read_bytes()

def test_zero_thresholds_pick_minimum(tmp_path,capsys):
    write_xwt(np.random.default_rng(7).normal(size=(8,128)),tmp_path/"w.xwt")
    cli_quantize(str(tmp_path/"w.xwt"),'-o',str(tmp_path/"m.xfpq"),'--default-class','self_attention',
                 '--tau-strict','0','--tau-lazy','0')
    assert json.loads(capsys.readouterr().out)['layers'][0]['n_bits']==2
