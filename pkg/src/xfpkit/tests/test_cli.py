import json

import numpy as np
import pytest

from xfpkit.io.xwt import write_xwt
from xfpkit.util.cli import cli_helper, xfpkit_cli_main, xfpkit_cli_funcs
from xfpkit.util.util import import_modfunc


def test_every_command_resolves():
    for dotpath in xfpkit_cli_funcs.values():
        assert callable(import_modfunc(dotpath))

def test_unknown_command(capsys):
    with pytest.raises(SystemExit) as e:
        xfpkit_cli_main(['xfpkit','frobnicate'])
    assert e.value.code==2
    assert 'COMMAND' in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        xfpkit_cli_main(['xfpkit'])
    assert e.value.code==2

def test_abbreviation(capsys):
    xfpkit_cli_main(['xfpkit','be','--bits-low','2'])
    assert json.loads(capsys.readouterr().out)['percent']==pytest.approx(100*(0.25+0.36)/18,abs=0.01)
    xfpkit_cli_main(['xfpkit','geo','3','80'])
    assert json.loads(capsys.readouterr().out)['lanes_per_group']==8

def test_domain_errors_exit_one(tmp_path,capsys):
    (tmp_path/"bad.xfpq").write_bytes(b'nope')
    with pytest.raises(SystemExit) as e:
        xfpkit_cli_main(['xfpkit','report',str(tmp_path/"bad.xfpq")])
    assert e.value.code==1
    assert 'xfpkit report' in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        xfpkit_cli_main(['xfpkit','breakeven','--bits-low','4','--bits-high','4'])
    assert e.value.code==1

def test_invalid_policy_exits_one(tmp_path,capsys):
    write_xwt(np.ones((2,16)),tmp_path/"w.xwt")
    with pytest.raises(SystemExit) as e:
        xfpkit_cli_main(['xfpkit','quantize',str(tmp_path/"w.xwt"),'-o',str(tmp_path/"m.xfpq"),
                         '--default-class','lm_head','--tau-strict','0.5','--tau-lazy','0.9'])
    assert e.value.code==1
    assert not (tmp_path/"m.xfpq").exists()

def test_missing_input_exits_one(tmp_path):
    with pytest.raises(SystemExit) as e:
        xfpkit_cli_main(['xfpkit','q',str(tmp_path/"absent.xwt"),'-o',str(tmp_path/"m.xfpq"),'--default-class','lm_head'])
    assert e.value.code==1

def test_weight_beyond_half_range_exits_one(tmp_path,capsys):
    W=np.random.default_rng(0).normal(size=(8,256)).astype(np.float32)
    W[3,7]=1e5
    write_xwt(W,tmp_path/"w.xwt")
    with pytest.raises(SystemExit) as e:
        xfpkit_cli_main(['xfpkit','quantize',str(tmp_path/"w.xwt"),'-o',str(tmp_path/"m.xfpq"),'--default-class','lm_head'])
    assert e.value.code==1
    assert '65504' in capsys.readouterr().err
    assert not (tmp_path/"m.xfpq").exists()

def test_synth_then_quantize(tmp_path,capsys):
    xfpkit_cli_main(['xfpkit','synth','dense_mlp','8','128','-o',str(tmp_path/"w.xwt")])
    xfpkit_cli_main(['xfpkit','quantize',str(tmp_path/"w.xwt"),'-o',str(tmp_path/"m.xfpq"),'--default-class','shared_expert'])
    lines=capsys.readouterr().out
    report=json.loads(lines[lines.index('{\n'):])
    assert report['layers'][0]['name']=='w'

def test_helper_rejects_overlapping_abbreviations():
    with pytest.raises(AssertionError):
        cli_helper({'go (g)':'a:b','g (x)':'a:c'})
