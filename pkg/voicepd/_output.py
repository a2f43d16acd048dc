"""
Provenance stamping of output artifacts.

Every CSV/JSON/SVG written by the tool carries tool version, seed and config
hash. CSV files get it as a leading ``#`` comment line, read them back with
``pandas.read_csv(..., comment="#")``.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import pandas as pd

from ._version import __version__
from .types import SomePath


@dataclass(frozen=True)
class Provenance:
    seed: int = 0
    config_hash: str = ""

    def as_dict(self) -> Dict[str, Any]:
        return {"tool": "voicepd", "version": __version__, "seed": self.seed, "config_hash": self.config_hash}

    def comment(self) -> str:
        return f"voicepd {__version__} seed={self.seed} config={self.config_hash}"


def write_csv(df: pd.DataFrame, path: SomePath, prov: Optional[Provenance] = None, **kw) -> Path:
    """Write ``df`` with an optional provenance comment line."""
    path = Path(path)
    with open(path, "wt", encoding="utf8", newline="") as dst:
        if prov is not None:
            dst.write(f"# {prov.comment()}\n")
        df.to_csv(dst, index=False, lineterminator="\n", **kw)
    return path


def read_csv(path: SomePath, **kw) -> pd.DataFrame:
    return pd.read_csv(path, comment="#", **kw)
