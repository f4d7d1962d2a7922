__version__ = "0.3.0"


class XfpError(Exception):
    """ Base class for every error raised by xfpkit on bad inputs or corrupt artifacts. """
