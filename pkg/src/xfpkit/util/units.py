from pint import UnitRegistry

units = UnitRegistry()

def parse_bytes(value) -> int:
    """ A byte count from an int or a quantity string like "96 GiB" or "8 GB". """
    if isinstance(value,(int,float)):
        return int(value)
    return int(round(units.Quantity(str(value)).to('byte').magnitude))

def format_gib(n_bytes: float) -> float:
    return (n_bytes*units.byte).to('GiB').magnitude
