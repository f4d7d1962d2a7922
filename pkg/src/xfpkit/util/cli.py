import sys
from pathlib import Path
from typing import Optional, List, Callable

from xfpkit import XfpError
from xfpkit.util.util import import_modfunc

def cli_helper(cli_funcs) -> Callable[[Optional[List[str]]],None]:
    cli_func_longhand={k.split("(")[0].strip():v for k,v in cli_funcs.items()}
    cli_func_abbrevs={k.split("(")[1].strip()[:-1]:k.split("(")[0].strip() for k in cli_funcs if '(' in k}
    assert all(k not in cli_func_longhand for k in cli_func_abbrevs), "Abbreviations must not overlap with longhand names"

    def do_cli(override_sysargs=None):
        args=override_sysargs if override_sysargs is not None else sys.argv.copy()
        try:
            sub_call=args[1]
            if sub_call in cli_func_abbrevs: sub_call=cli_func_abbrevs[sub_call]
            func_dotpath=cli_func_longhand[sub_call]
        except (IndexError,KeyError):
            print(f'Call like "{Path(args[0]).name} COMMAND" where COMMAND options are:',file=sys.stderr)
            for name in sorted(cli_funcs):
                print(f"- {name}",file=sys.stderr)
            print(f'Run "{Path(args[0]).name} COMMAND -h" for more info about any command',file=sys.stderr)
            sys.exit(2)

        func=import_modfunc(func_dotpath)
        initial_sys_argv=sys.argv.copy()
        try:
            sys.argv=[(args[0]+' '+args[1]),*args[2:]]
            return func(*args[2:])
        except (XfpError,OSError) as e:
            print(f"{Path(args[0]).name} {args[1]}: {e}",file=sys.stderr)
            sys.exit(1)
        finally: sys.argv=initial_sys_argv
    return do_cli


xfpkit_cli_funcs={
    'quantize (q)': 'xfpkit.io.container:cli_quantize',
    'dequantize (dq)': 'xfpkit.io.container:cli_dequantize',
    'report (r)': 'xfpkit.io.container:cli_report',
    'sweep (sw)': 'xfpkit.planning.hprocess:cli_sweep',
    'breakeven (be)': 'xfpkit.planning.hprocess:cli_breakeven',
    'synth (sy)': 'xfpkit.synth.generator:cli_synth',
    'geometry (geo)': 'xfpkit.quant.packing:cli_geometry',
}
xfpkit_cli_main=cli_helper(cli_funcs=xfpkit_cli_funcs)
