import numpy as np
import pytest

from xfpkit import XfpError
from xfpkit.quant.autoselect import QualityPolicy, LayerClass, Mode
from xfpkit.quant.layer import encode_layer, encode_expert_group, decode_layer, decode_bulk, layer_quality, \
    effective_bits, effective_bits_for, reconstruction_table, summarize_reconstruction, check_admissible, LayerFormatError
from xfpkit.quant.tensor import HalfOverflowError, half_ulp, per_channel_cosine, lower_median


@pytest.mark.parametrize('mode',[Mode.V2,Mode.V2A])
def test_encode_decode(mode):
    W=np.random.default_rng(0).standard_t(4,size=(16,256)).astype(np.float32)
    layer=encode_layer(W,LayerClass.SHARED_EXPERT,QualityPolicy(),mode,name='w')
    assert layer.mode==mode and layer.shape==(16,256) and layer.report.chosen_n==layer.n_bits
    recon=decode_layer(layer).data
    assert lower_median(per_channel_cosine(W,recon))==pytest.approx(layer.report.candidate_cos[layer.n_bits],abs=1e-6)
    if mode==Mode.V2A:
        assert layer.library is not None and layer.assignment.library_index.shape==(16,2)
    else:
        assert len(layer.codebooks)==16

def test_forced_width():
    W=np.random.default_rng(1).normal(size=(8,128))
    layer=encode_layer(W,LayerClass.LM_HEAD,QualityPolicy(),Mode.V2,n_bits=5)
    assert layer.n_bits==5 and layer.packed.words.dtype==np.dtype('<u2')
    with pytest.raises(LayerFormatError):
        encode_layer(W,LayerClass.LM_HEAD,QualityPolicy(),Mode.V2A,n_bits=3)
    with pytest.raises(LayerFormatError):
        check_admissible(Mode.V2,7)

@pytest.mark.parametrize('mode,convention',[(Mode.V2,'add'),(Mode.V2A,'add'),(Mode.V2,'overwrite'),(Mode.V2A,'overwrite')])
def test_outlier_positions_exact(mode,convention):
    rng=np.random.default_rng(2)
    policy=QualityPolicy(residual_convention=convention)
    for _ in range(25):
        W=rng.standard_t(2,size=(8,128)).astype(np.float32)
        layer=encode_layer(W,LayerClass.SELF_ATTENTION,policy,mode)
        recon=decode_layer(layer).data
        r,c=layer.outliers.rows,layer.outliers.cols
        assert len(r)
        bulk=decode_bulk(layer)
        tol=half_ulp(np.maximum(np.abs(W[r,c]),np.abs(W[r,c]-bulk[r,c])))
        assert np.all(np.abs(recon[r,c]-W[r,c])<=tol)

def test_effective_bits_constants():
    for n,expected in [(2,2.3125),(4,4.3125)]:
        eb=effective_bits_for(Mode.V2A,n,4096,4096,group_size=128,library_size=32)
        assert eb.total==pytest.approx(expected,abs=0.005)
    eb=effective_bits_for(Mode.V2A,4,4096,4096,outlier_count=int(0.02*4096*4096))
    assert eb.outlier_bits_per_weight==pytest.approx(2.88,abs=1e-3)
    assert eb.total-eb.total_without_outliers==pytest.approx(2.88,abs=1e-3)
    # V2: one 2^N-entry half codebook per row
    assert effective_bits_for(Mode.V2,4,4096,4096).codebook_overhead_bits_per_weight==pytest.approx(16*16/4096)
    assert effective_bits_for(Mode.V2,3,10,10).index_bits_per_weight==pytest.approx(3.2)

def test_effective_bits_of_layer():
    W=np.random.default_rng(3).normal(size=(8,256))
    layer=encode_layer(W,LayerClass.SHARED_EXPERT,QualityPolicy(),Mode.V2,n_bits=2)
    eb=effective_bits(layer)
    assert eb.index_bits_per_weight==2.0
    assert eb.outlier_bits_per_weight==pytest.approx(144*len(layer.outliers)/W.size)

def test_expert_group_shares_width():
    rng=np.random.default_rng(4)
    experts=[(f"e{i}",rng.normal(size=(4,128))) for i in range(8)]
    layers=encode_expert_group(experts,QualityPolicy(),Mode.V2)
    assert [l.name for l in layers]==[n for n,_ in experts]
    assert len({l.n_bits for l in layers})==1
    assert all(l.layer_class==LayerClass.ROUTED_EXPERT and l.report.sampled_experts==(0,1,2,3) for l in layers)

def test_reconstruction_table():
    rng=np.random.default_rng(5)
    W={'a':rng.standard_t(3,size=(8,128)),'b':rng.normal(size=(8,128))}
    layers=[encode_layer(W['a'],LayerClass.SELF_ATTENTION,QualityPolicy(),Mode.V2,name='a',n_bits=3),
            encode_layer(W['b'],LayerClass.ROUTED_EXPERT,QualityPolicy(),Mode.V2,name='b',n_bits=3)]
    table=reconstruction_table(layers,W)
    assert list(table['layer'])==['a','b']
    assert np.all(table['mse_ratio']>=1.0)
    q=layer_quality(layers[0],W['a'])
    assert table.loc[0,'cos_outlier']==pytest.approx(q.median_cos)
    summary=summarize_reconstruction(table)
    assert len(summary)==2

def test_weight_beyond_half_range_is_refused():
    W=np.random.default_rng(6).normal(size=(8,256)).astype(np.float32)
    W[3,7]=1e5
    for mode in [Mode.V2,Mode.V2A]:
        with pytest.raises(HalfOverflowError) as e:
            encode_layer(W,LayerClass.SELF_ATTENTION,QualityPolicy(),mode)
        assert isinstance(e.value,XfpError)
    W[3,7]=6e4
    recon=decode_layer(encode_layer(W,LayerClass.SELF_ATTENTION,QualityPolicy(),Mode.V2)).data
    assert np.isfinite(recon).all()
    assert recon[3,7]==pytest.approx(6e4,rel=1e-3)

def test_v2_effective_bits_limit():
    # Reserve bits are real storage: the per-row codebooks vanish as rows grow long, the word waste does not
    for n,expected in [(2,2.0),(3,3.2),(4,4.0),(5,16/3),(6,6.4)]:
        eb=effective_bits_for(Mode.V2,n,4,10**12)
        assert eb.total==pytest.approx(expected,abs=1e-6)
    assert round(effective_bits_for(Mode.V2,5,4,10**12).total,2)==5.33

@pytest.mark.parametrize('mode',[Mode.V2,Mode.V2A])
def test_decoded_median_cosine_meets_active_floor(mode):
    rng=np.random.default_rng(7)
    policy=QualityPolicy(tau_strict=.97,tau_lazy=.95,lloyd_iters=10,moe_lloyd_iters=10)
    passed=0
    for i in range(12):
        W=rng.standard_t(2+i%4,size=(8,256)).astype(np.float32)
        cls=[LayerClass.SELF_ATTENTION,LayerClass.ROUTED_EXPERT,LayerClass.SHARED_EXPERT][i%3]
        layer=encode_layer(W,cls,policy,mode)
        if layer.report.fallback_used: continue
        passed+=1
        assert lower_median(per_channel_cosine(W,decode_layer(layer).data))>=layer.report.active_tau
    assert passed
