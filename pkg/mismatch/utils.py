import dataclasses
import json
import os
import sys
import time
from functools import wraps
from logging import getLogger
from logging import Logger
from logging import StreamHandler
from typing import Any
from typing import Mapping
from typing import Optional
from typing import Sequence
from warnings import warn

import numpy as np

logger = getLogger("mismatch")
if not logger.handlers:
    handler = StreamHandler(stream=sys.stderr)
    logger.addHandler(handler)
logger.setLevel("INFO")


# display utils
def add_clock(f):
    """Log the wall time of each call to ``f`` on the package logger"""

    def _rename_string(f_name):
        if f_name.startswith("measure") or f_name.startswith("generate"):
            return f_name.replace("_", " ")
        return "run " + f_name.replace("_", " ")

    @wraps(f)
    def clocked_f(*args, **kwargs):
        f_name = _rename_string(f.__name__)
        t0 = time.perf_counter()
        result = f(*args, **kwargs)
        elapsed_time = time.perf_counter() - t0
        logger.info(f_name + ": " + "[%0.4fs]" % elapsed_time)
        return result

    return clocked_f


def _warn_external(
    message: str, loggr: Optional[Logger] = None, category: Optional[type] = None
):
    """Convenience function to print a warning to the log, but also create a Warning

    This allows warnings to be caught and debugged by the warnings filter, but also
    appear in any concurrent log
    """
    if loggr is not None:
        loggr.warning(message, stacklevel=2)
    warn(message, category, stacklevel=2)


#############################
# General Purpose functions #
#############################


def create_directory(directory: str) -> None:
    # Create the directory if it does not exist
    if not os.path.exists(directory):
        os.makedirs(directory)


def write_json(path: str, payload: Mapping[str, Any]) -> None:
    """Write a mapping as sorted, indented JSON so reruns are byte-identical."""
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path: str) -> dict[str, Any]:
    with open(path) as f:
        return json.load(f)


def write_csv(path: str, columns: Mapping[str, Sequence[Any]]) -> None:
    """
    Write equal-length columns to a CSV file with a header row.

    Floats are written with 17 significant digits so that reading the file back
    reproduces the values exactly. Strings and ints are written verbatim.

    Parameters:
    ----------
    path:
        destination file.

    columns:
        ordered mapping of column name to values.
    """
    names = list(columns)
    lengths = {len(columns[name]) for name in names}
    if len(lengths) > 1:
        raise ValueError(f"CSV columns have unequal lengths: {sorted(lengths)}")
    n_rows = lengths.pop() if lengths else 0

    fmt = []
    for name in names:
        values = list(columns[name])
        if values and isinstance(values[0], str):
            fmt.append("%s")
        elif values and all(isinstance(v, (int, np.integer)) for v in values):
            fmt.append("%d")
        else:
            fmt.append("%.17g")

    table = np.empty((n_rows, len(names)), dtype=object)
    for j, name in enumerate(names):
        for i, value in enumerate(columns[name]):
            table[i, j] = value
    np.savetxt(
        path, table, fmt=fmt, delimiter=",", header=",".join(names), comments=""
    )


def read_csv(path: str) -> dict[str, np.ndarray]:
    """Read a CSV written by :func:`write_csv` back into named columns."""
    table = np.genfromtxt(
        path, delimiter=",", names=True, dtype=None, encoding="utf-8"
    )
    table = np.atleast_1d(table)
    return {name: np.asarray(table[name]) for name in table.dtype.names}


def config_from_dict(cls: type, payload: Optional[Mapping[str, Any]]):
    """
    Build a dataclass config from a mapping, rejecting unknown keys.

    Missing keys fall back to the dataclass defaults. Lists are converted to
    tuples so that the resulting config stays hashable.
    """
    if payload is None:
        return cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ValueError(f"Unknown key(s) for {cls.__name__}: {', '.join(unknown)}")
    kwargs = {
        key: tuple(value) if isinstance(value, list) else value
        for key, value in payload.items()
    }
    return cls(**kwargs)


def config_to_dict(config) -> dict[str, Any]:
    """JSON-ready dictionary of a (possibly nested) dataclass config."""
    payload = dataclasses.asdict(config)

    def _plain(value):
        if isinstance(value, tuple):
            return [_plain(v) for v in value]
        if isinstance(value, dict):
            return {k: _plain(v) for k, v in value.items()}
        if hasattr(value, "value"):
            return value.value
        return value

    return {k: _plain(v) for k, v in payload.items()}
