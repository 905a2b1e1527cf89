"""
Storage - trial tables, chains and result files on disk

Formats:
    trials       CSV  subject,task,cell,response,rt (rt in seconds)
    chain        NDJSON, one stored draw per line:
                 {"iter", "stage", "mu", "sigma" (row-major), "a", "alpha" (subject-major)}
    meta.json    parameter names, block labels, subject ids, model document,
                 design counts, degeneracy counts, input hashes, sampler settings
    tables       CSV via pandas

Every file is written to a temporary name in the target directory and
renamed into place, so readers never see a partial file.

Usage:
    from storage import load_trials_csv, write_chain, read_chain

    trials = load_trials_csv("trials.csv")
    write_chain(chain, "out/chain.ndjson", meta)
    chain, meta = read_chain("out/chain.ndjson")
"""

import hashlib
import json
import logging
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from design_map import ModelSpec, parse_model_spec
from errors import ConfigurationError, DataNotFoundError, InvalidInputError
from lba import TrialRecord
from pmwg import ChainRecord, PosteriorChain

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
TRIAL_COLUMNS = ("subject", "task", "cell", "response", "rt")
META_NAME = "meta.json"


# ==================== FILE HELPERS ====================

@contextmanager
def atomic_write(path: PathLike, mode: str = "w") -> Iterator[Any]:
    """Open a temp file next to `path`; rename it over `path` only on success"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, mode, newline="" if "b" not in mode else None) as handle:
            yield handle
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def write_json(document: Mapping[str, Any], path: PathLike) -> Path:
    with atomic_write(path) as handle:
        json.dump(document, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return Path(path)


def read_json(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"file not found: {path}", path=str(path))
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"not valid JSON: {path}: {e}", path=str(path)) from e


def write_table(frame: pd.DataFrame, path: PathLike) -> Path:
    with atomic_write(path) as handle:
        frame.to_csv(handle, index=False, lineterminator="\n")
    return Path(path)


# ==================== TRIALS ====================

def load_trials_csv(path: PathLike, columns: Optional[Mapping[str, str]] = None,
                    rt_unit: str = "s") -> List[TrialRecord]:
    """
    Read a trial table

    Args:
        path: CSV file
        columns: Map from our column names (subject, task, cell, response, rt)
            to the names used in the file; unmapped names are used as is
        rt_unit: "s" or "ms"

    Raises:
        DataNotFoundError: If the file does not exist
        ConfigurationError: If required columns are missing or rt_unit is unknown
        InvalidInputError: If a row violates trial preconditions
    """
    path = Path(path)
    if not path.is_file():
        raise DataNotFoundError(f"data file not found: {path}", path=str(path))
    if rt_unit not in ("s", "ms"):
        raise ConfigurationError(f"rt_unit must be 's' or 'ms': {rt_unit}")

    mapping = {name: name for name in TRIAL_COLUMNS}
    mapping.update(columns or {})
    text_columns = {mapping[name]: str for name in ("subject", "task", "cell")}
    frame = pd.read_csv(path, dtype=text_columns, float_precision="round_trip")
    missing = [ours for ours, theirs in mapping.items() if theirs not in frame.columns]
    if missing:
        raise ConfigurationError(f"trial table lacks columns: {missing}", path=str(path),
                                 found=list(frame.columns))

    frame = frame.rename(columns={theirs: ours for ours, theirs in mapping.items()})[list(TRIAL_COLUMNS)]
    if frame[["response", "rt"]].isna().any().any():
        raise InvalidInputError("trial table has empty response or rt values", path=str(path))
    scale = 1e-3 if rt_unit == "ms" else 1.0

    trials = []
    for row in frame.itertuples(index=False):
        response = float(row.response)
        if response != int(response):
            raise InvalidInputError(f"response must be an integer index: {row.response}", subject=row.subject)
        trials.append(TrialRecord(str(row.subject), str(row.task), str(row.cell), int(response),
                                  float(row.rt) * scale))
    logger.info("✓ loaded %d trials from %s", len(trials), path)
    return trials


def trials_frame(trials: Sequence[TrialRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        [(t.subject_id, t.task, t.cell, t.response, t.rt) for t in trials],
        columns=list(TRIAL_COLUMNS),
    )


def write_trials_csv(trials: Sequence[TrialRecord], path: PathLike) -> Path:
    return write_table(trials_frame(trials), path)


# ==================== CHAINS ====================

def _record_line(record: ChainRecord) -> str:
    return json.dumps({
        "iter": record.iteration,
        "stage": record.stage,
        "mu": record.mu.tolist(),
        "sigma": record.sigma.ravel().tolist(),
        "a": record.a.tolist(),
        "alpha": record.alpha.ravel().tolist(),
    }, separators=(",", ":"))


def chain_meta(chain: PosteriorChain, spec: ModelSpec,
               design: Optional[Mapping[Tuple[str, str, str], int]] = None,
               hashes: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """Everything summarize / predict need besides the draws"""
    return {
        "parameter_names": chain.parameter_names,
        "block_labels": chain.block_labels,
        "subject_ids": chain.subject_ids,
        "model": spec.model_dump(mode="json"),
        "design_counts": [
            {"subject": s, "task": t, "cell": c, "n": n} for (s, t, c), n in (design or {}).items()
        ],
        "hashes": dict(hashes or {}),
        **chain.metadata,
    }


def write_chain(chain: PosteriorChain, path: PathLike, meta: Optional[Mapping[str, Any]] = None) -> Path:
    """Write the NDJSON chain and, when given, meta.json beside it"""
    path = Path(path)
    with atomic_write(path) as handle:
        for record in chain.draws:
            handle.write(_record_line(record))
            handle.write("\n")
    if meta is not None:
        write_json(meta, path.parent / META_NAME)
    logger.info("✓ wrote %d draws to %s", len(chain), path)
    return path


def read_chain(path: PathLike, meta_path: Optional[PathLike] = None) -> Tuple[PosteriorChain, Dict[str, Any]]:
    """
    Raises:
        DataNotFoundError: If the chain file does not exist
        ConfigurationError: If meta.json is missing or a line does not parse
    """
    path = Path(path)
    if not path.is_file():
        raise DataNotFoundError(f"chain file not found: {path}", path=str(path))
    meta = read_json(Path(meta_path) if meta_path else path.parent / META_NAME)
    names = meta["parameter_names"]
    subjects = meta["subject_ids"]
    d, n_subjects = len(names), len(subjects)

    known = {"parameter_names", "block_labels", "subject_ids", "model", "design_counts", "hashes"}
    chain = PosteriorChain(
        parameter_names=list(names),
        subject_ids=list(subjects),
        block_labels=list(meta["block_labels"]),
        metadata={k: v for k, v in meta.items() if k not in known},
    )
    with open(path) as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                chain.append(ChainRecord(
                    iteration=int(row["iter"]),
                    stage=row["stage"],
                    mu=np.asarray(row["mu"], dtype=float),
                    sigma=np.asarray(row["sigma"], dtype=float).reshape(d, d),
                    a=np.asarray(row["a"], dtype=float),
                    alpha=np.asarray(row["alpha"], dtype=float).reshape(n_subjects, d),
                ))
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise ConfigurationError(f"{path}:{line_no}: bad chain record: {e}", path=str(path)) from e
    return chain, meta


def spec_from_meta(meta: Mapping[str, Any]) -> ModelSpec:
    if "model" not in meta:
        raise ConfigurationError("meta.json has no model document")
    return parse_model_spec(meta["model"])


def design_from_meta(meta: Mapping[str, Any]) -> Dict[Tuple[str, str, str], int]:
    return {(row["subject"], row["task"], row["cell"]): int(row["n"]) for row in meta.get("design_counts", [])}
