import numpy as np
import pytest

from xfpkit.quant.outlier import extract_outliers, finalize_residuals, apply_outliers, max_outliers, outlier_bytes, \
    OutlierSet, OutlierPositionError, OutlierParameterError
from xfpkit.quant.tensor import channel_stats, half_ulp


def test_extracts_beyond_threshold():
    W=np.zeros((10,10),dtype=np.float32)
    W[2,3]=100.
    bulk,out=extract_outliers(W,k=4,cap_fraction=0.02)
    assert len(out)==1 and (out.rows[0],out.cols[0])==(2,3)
    assert float(out.values[0])==100.
    assert bulk[2,3]==np.float32(out.mu_used)
    assert not out.residual

def test_constant_matrix_has_no_outliers():
    bulk,out=extract_outliers(np.full((4,8),3.0))
    assert len(out)==0 and out.sigma_used==0
    assert np.array_equal(bulk,np.full((4,8),3.0,dtype=np.float32))

def test_cap_keeps_largest_with_lower_position_on_ties():
    W=np.zeros((10,10),dtype=np.float32)
    for (r,c),v in {(0,1):50.,(1,1):50.,(5,5):-70.,(9,9):40.}.items():
        W[r,c]=v
    _,out=extract_outliers(W,k=1,cap_fraction=0.02)
    assert max_outliers(0.02,100)==2
    assert list(zip(out.rows,out.cols))==[(0,1),(5,5)]

def test_zero_cap_extracts_nothing():
    W=np.zeros((4,4)); W[0,0]=1e3
    _,out=extract_outliers(W,cap_fraction=0.0)
    assert len(out)==0

def test_bad_parameters():
    with pytest.raises(OutlierParameterError):
        extract_outliers(np.ones((2,2)),k=0)
    with pytest.raises(OutlierParameterError):
        extract_outliers(np.ones((2,2)),cap_fraction=1.5)

def test_residual_restores_within_one_ulp():
    rng=np.random.default_rng(3)
    for _ in range(20):
        W=rng.standard_t(2,size=(16,64)).astype(np.float32)
        bulk,out=extract_outliers(W,k=3,cap_fraction=0.05)
        recon=np.round(bulk*4)/4
        final=finalize_residuals(out,W,recon)
        assert final.residual
        dec=apply_outliers(recon,final,'add')
        r,c=final.rows,final.cols
        resid=W[r,c]-recon[r,c]
        assert np.all(np.abs(dec[r,c]-W[r,c])<=half_ulp(np.maximum(np.abs(resid),np.abs(W[r,c]))))

def test_overwrite_convention():
    W=np.zeros((3,3),dtype=np.float32); W[1,2]=9.0
    _,out=extract_outliers(W,k=1,cap_fraction=0.5)
    dec=apply_outliers(np.full((3,3),5.0),out,'overwrite')
    assert dec[1,2]==9.0 and dec[0,0]==5.0

def test_out_of_range_positions():
    out=OutlierSet(rows=[3],cols=[0],values=[1.0],k=4,cap_fraction=.02,mu_used=0,sigma_used=1)
    with pytest.raises(OutlierPositionError):
        apply_outliers(np.zeros((3,3)),out)
    assert outlier_bytes(out)==18
    assert out.entries[0][2].bits==0x3C00

def test_extraction_from_bulk_is_idempotent():
    rng=np.random.default_rng(4)
    checked=0
    for i in range(40):
        W=rng.normal(size=(16,128)).astype(np.float32)
        W[rng.integers(16),rng.integers(128)]+=rng.choice([-1,1])*rng.uniform(6,20)
        k=[3.0,4.0,5.0][i%3]
        bulk,_=extract_outliers(W,k=k,cap_fraction=0.02)
        mu,sigma=channel_stats(bulk)
        if sigma*k<np.abs(bulk.astype(np.float64)-mu).max(): continue
        checked+=1
        again,out=extract_outliers(bulk,k=k,cap_fraction=0.02)
        assert len(out)==0
        assert np.array_equal(again,bulk)
    assert checked>=10

@pytest.mark.parametrize('cap',[0.005,0.02,0.2])
def test_count_never_grows_with_k(cap):
    rng=np.random.default_rng(5)
    for _ in range(10):
        W=rng.standard_t(2,size=(32,64))
        counts=[len(extract_outliers(W,k=k,cap_fraction=cap)[1]) for k in np.linspace(0.5,8,16)]
        assert all(a>=b for a,b in zip(counts,counts[1:]))
