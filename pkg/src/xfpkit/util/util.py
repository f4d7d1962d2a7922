import importlib.resources as irsc
from importlib import import_module
from pathlib import Path


def import_modfunc(dotpath: str):
    """ The function named by 'package.module:function'. """
    try: mod,func=dotpath.split(':')
    except ValueError:
        raise ValueError(f"Dotpath '{dotpath}' is improperly formatted ('package.module:function')")
    return getattr(import_module(mod),func)

def get_resource_path(dotpath) -> Path:
    """ Path of a file shipped inside a package, given as 'package:relative/path'. """
    pkg,relpath=dotpath.split(":")
    with irsc.as_file(irsc.files(pkg)) as pkg_path:
        return pkg_path/relpath
