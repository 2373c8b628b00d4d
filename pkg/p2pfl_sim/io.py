"""Functions for loading and saving run configurations, run records and
summaries.

Run configs are JSON or YAML mappings::

    schema: p2pfl-sim/1
    preset: p2p5-node4-labelflip
    overrides:
      algorithm: bayp2pfl
    output:
      directory: runs/bayp2pfl
      format: csv
    workers: 4

Record tables have one header row and one row per client per local cycle;
floats are written with 17 significant digits so they read back bit-exactly.
"""

import collections
import contextlib
import dataclasses
import json
import os
import re

import numpy as np
import yaml

from . import analysis
from . import presets
from . import util

SCHEMA = "p2pfl-sim/1"
CONFIG_FIELDS = ("schema", "preset", "scenario", "overrides", "output", "workers", "verbosity")
OUTPUT_FIELDS = ("directory", "format")
FORMATS = ("csv", "json")

OUTPUT_ENV = "P2PFL_SIM_OUT"
DEFAULT_OUTPUT = "p2pfl-out"

RECORD_STEM = "records"
SUMMARY_FILE = "summary.json"
RESOLVED_CONFIG_FILE = "resolved-config.json"
ASSUMPTIONS_FILE = "assumptions.json"

FLOAT_FORMAT = "%.17g"
ID_SEPARATOR = ";"

METADATA = re.compile(r"^#\s*dim=(\d+)\s+clients=([\d;]*)\s+compromised=([\d;]*)\s*$")


@contextlib.contextmanager
def _open(file_or_path, **kwargs):
    """Either open a file handle, or use an existing file-like object.

    If `file_or_path` has the `read` (or `write`) attribute, it will return
    `file_or_path`.

    Otherwise, it will attempt to open the file at the specified location.
    """
    if hasattr(file_or_path, "read") or hasattr(file_or_path, "write"):
        yield file_or_path
    else:
        try:
            with open(file_or_path, **kwargs) as file_desc:
                yield file_desc
        except TypeError as exc:
            raise IOError(f"Invalid file-or-path object: {file_or_path}") from exc


def default_output_directory():
    """``$P2PFL_SIM_OUT``, falling back to ``./p2pfl-out``."""
    return os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT


def parse_document(text):
    """Parse a JSON document, or a YAML one if it is not valid JSON."""
    try:
        return json.loads(text)
    except ValueError:
        pass
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise util.ConfigurationError(f"config is neither valid JSON nor YAML: {exc}") from exc


def load_document(file_or_path):
    """Read a JSON or YAML document without validating it.

    Parameters
    ----------
    file_or_path : str, os.PathLike or file-like

    Returns
    -------
    data : object
        The parsed document
    """
    with _open(file_or_path, mode="r") as handle:
        return parse_document(handle.read())


def load_config(file_or_path):
    """Load and validate a run config.

    Parameters
    ----------
    file_or_path : str, os.PathLike or file-like

    Returns
    -------
    config : RunConfig

    Raises
    ------
    ConfigurationError
        On any invalid or unknown field.
    """
    return resolve_config(load_document(file_or_path))


def parse_override(text):
    """Split ``key=value``; the value is read as a JSON literal when possible.

    Examples
    --------
    >>> parse_override("kappa=3")
    ('kappa', 3)
    >>> parse_override("algorithm=bayp2pfl")
    ('algorithm', 'bayp2pfl')
    """
    key, sep, value = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise util.ConfigurationError(f"override {text!r} must look like key=value")
    try:
        return key, json.loads(value)
    except ValueError:
        return key, value


def apply_override(data, key, value):
    """Set dotted ``key`` inside the nested mapping ``data``."""
    parts = key.split(".")
    node = data
    for depth, part in enumerate(parts[:-1]):
        child = node.get(part)
        if child is None:
            child = node[part] = {}
        elif not isinstance(child, dict):
            path = ".".join(parts[: depth + 1])
            raise util.ConfigurationError(f"override scenario.{key}: scenario.{path} is not a mapping")
        node = child
    node[parts[-1]] = value
    return data


def _merge(base, update):
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """A validated run configuration with its scenario fully resolved."""

    scenario: presets.Scenario
    output_directory: str
    output_format: str = "csv"
    workers: int = 1
    verbosity: int = 0

    def to_dict(self):
        """The resolved config: every scenario default materialized."""
        return collections.OrderedDict(
            [
                ("schema", SCHEMA),
                ("preset", None),
                ("scenario", self.scenario.to_dict()),
                ("overrides", {}),
                (
                    "output",
                    collections.OrderedDict(
                        [("directory", self.output_directory), ("format", self.output_format)]
                    ),
                ),
                ("workers", self.workers),
                ("verbosity", self.verbosity),
            ]
        )


def resolve_config(data, overrides=None, seed=None, output_directory=None, output_format=None,
                   workers=None):
    """Validate a config mapping and build its scenario.

    Command line values, when given, take precedence over the mapping.

    Parameters
    ----------
    data : dict
    overrides : list of (str, object) or None
        Extra dotted-key overrides, applied after the config's own
    seed : int or None
    output_directory, output_format : str or None
    workers : int or None

    Returns
    -------
    config : RunConfig
    """
    if not isinstance(data, dict):
        raise util.ConfigurationError("config must be a mapping")
    unknown = sorted(set(data) - set(CONFIG_FIELDS))
    if unknown:
        raise util.ConfigurationError(f"unknown config field(s): {', '.join(unknown)}")
    if data.get("schema") != SCHEMA:
        raise util.ConfigurationError(f"schema must be {SCHEMA!r}, got {data.get('schema')!r}")
    output = data.get("output") or {}
    if not isinstance(output, dict):
        raise util.ConfigurationError("output must be a mapping")
    unknown = sorted(set(output) - set(OUTPUT_FIELDS))
    if unknown:
        raise util.ConfigurationError(
            "unknown config field(s): " + ", ".join(f"output.{k}" for k in unknown)
        )

    if data.get("preset") is None and data.get("scenario") is None:
        raise util.ConfigurationError("config needs a preset or a scenario")
    scenario = {}
    if data.get("preset") is not None:
        scenario = json.loads(json.dumps(presets.preset(data["preset"]).to_dict()))
    if data.get("scenario") is not None:
        if not isinstance(data["scenario"], dict):
            raise util.ConfigurationError("scenario must be a mapping")
        _merge(scenario, json.loads(json.dumps(data["scenario"])))
    items = list((data.get("overrides") or {}).items()) + list(overrides or [])
    if seed is not None:
        items.append(("seed", seed))
    for key, value in items:
        apply_override(scenario, key, value)
    try:
        resolved = presets.Scenario.from_dict(scenario)
    except TypeError as exc:
        raise util.ConfigurationError(f"invalid scenario: {exc}") from exc

    output_format = output_format or output.get("format", "csv")
    if output_format not in FORMATS:
        raise util.ConfigurationError(f"output.format must be one of {FORMATS}, got {output_format!r}")
    workers = data.get("workers", 1) if workers is None else workers
    if not isinstance(workers, int) or workers < 1:
        raise util.ConfigurationError(f"workers must be a positive integer, got {workers!r}")
    verbosity = data.get("verbosity", 0)
    if not isinstance(verbosity, int) or verbosity < 0:
        raise util.ConfigurationError(f"verbosity must be a nonnegative integer, got {verbosity!r}")
    return RunConfig(
        scenario=resolved,
        output_directory=output_directory or output.get("directory") or default_output_directory(),
        output_format=output_format,
        workers=workers,
        verbosity=verbosity,
    )


def save_json(data, file_or_path):
    """Write ``data`` as indented JSON (non-finite floats allowed)."""
    with _open(file_or_path, mode="w") as handle:
        json.dump(data, handle, indent=2)
        handle.write("\n")


def load_json(file_or_path):
    with _open(file_or_path, mode="r") as handle:
        return json.load(handle)


def record_columns(dim):
    """Header of a record table for a ``dim``-dimensional model."""
    return (
        ["client", "cycle", "tick"]
        + [f"social_mean_{k}" for k in range(dim)]
        + [f"social_variance_{k}" for k in range(dim)]
        + ["social_trace", "social_error"]
        + [f"local_mean_{k}" for k in range(dim)]
        + [f"local_variance_{k}" for k in range(dim)]
        + ["local_trace", "local_error", "received", "accepted", "overwritten", "events", "terminated"]
    )


def _floats(values):
    return [FLOAT_FORMAT % v for v in values]


def _ids(values):
    return ID_SEPARATOR.join(str(v) for v in values)


def _parse_ids(text):
    return tuple(int(v) for v in text.split(ID_SEPARATOR) if v)


def _parse_events(text):
    return tuple(v for v in text.split(ID_SEPARATOR) if v)


def _bool(text):
    if text not in ("0", "1"):
        raise ValueError(text)
    return text == "1"


def save_record_csv(record, file_or_path):
    with _open(file_or_path, mode="w", newline="") as handle:
        handle.write(
            "# dim={} clients={} compromised={}\n".format(
                record.dim, _ids(record.clients), _ids(record.compromised)
            )
        )
        handle.write(",".join(record_columns(record.dim)) + "\n")
        for row in record.rows:
            fields = (
                [str(row.client), str(row.cycle), str(row.tick)]
                + _floats(row.social_mean)
                + _floats(row.social_variances)
                + _floats([row.social_trace, row.social_error])
                + _floats(row.local_mean)
                + _floats(row.local_variances)
                + _floats([row.local_trace, row.local_error])
                + [
                    _ids(row.received),
                    _ids(row.accepted),
                    _ids(row.overwritten),
                    _ids(row.events),
                    "1" if row.terminated else "0",
                ]
            )
            handle.write(",".join(fields) + "\n")


def load_delimited(filename, converters, delimiter=r",", comment="#", header=None):
    r"""Load data from a table whose columns are delimited.
    The number of columns is inferred from the length of the provided converters list.

    Parameters
    ----------
    filename : str or `os.Pathlike`
        Path to the table

    converters : list of functions
        Each entry in column ``n`` of the file will be cast by the function
        ``converters[n]``.

    delimiter : str
        Separator regular expression.

    comment : str or None
        Comment regular expression.
        Any lines beginning with this string or pattern will be ignored.

        Setting to `None` disables comments.

    header : list of str or None
        When given, the first non-comment line must equal these column
        names.

    Returns
    -------
    columns : tuple of lists
        Each list in this tuple corresponds to values in one of the columns
        in the file.
    """
    n_columns = len(converters)
    columns = tuple(list() for _ in range(n_columns))
    splitter = re.compile(delimiter)
    commenter = None if comment is None else re.compile(f"^{comment}")
    expect_header = header is not None

    with _open(filename, mode="r") as input_file:
        for row, line in enumerate(input_file, 1):
            if commenter is not None and commenter.match(line):
                continue
            data = splitter.split(line.rstrip("\r\n"), n_columns - 1)
            if n_columns != len(data):
                raise ValueError(
                    "Expected {} columns, got {} at "
                    "{}:{:d}:\n\t{}".format(n_columns, len(data), filename, row, line)
                )
            if expect_header:
                if data != list(header):
                    raise ValueError(f"Unexpected header at {filename}:{row:d}:\n\t{line}")
                expect_header = False
                continue
            for value, column, converter in zip(data, columns, converters):
                try:
                    converted_value = converter(value)
                except Exception as exc:
                    raise ValueError(
                        "Couldn't convert value {} using {} "
                        "found at {}:{:d}:\n\t{}".format(
                            value, converter.__name__, filename, row, line
                        )
                    ) from exc
                column.append(converted_value)
    return columns


def _read_metadata(filename):
    with _open(filename, mode="r") as handle:
        first = handle.readline()
    match = METADATA.match(first.strip())
    if match is None:
        raise ValueError(f"{filename} does not start with a record metadata line")
    return int(match.group(1)), _parse_ids(match.group(2)), _parse_ids(match.group(3))


def load_record_csv(filename):
    """Read a record table written by :func:`save_record_csv`.

    Parameters
    ----------
    filename : str or os.PathLike

    Returns
    -------
    record : p2pfl_sim.analysis.RunRecord
    """
    dim, clients, compromised = _read_metadata(filename)
    header = record_columns(dim)
    converters = (
        [int, int, int]
        + [float] * (2 * dim + 2)
        + [float] * (2 * dim + 2)
        + [_parse_ids, _parse_ids, _parse_ids, _parse_events, _bool]
    )
    columns = load_delimited(filename, converters, header=header)
    (client, cycle, tick), rest = columns[:3], columns[3:]
    social_mean = np.column_stack(rest[:dim])
    social_variances = np.column_stack(rest[dim : 2 * dim])
    social_error = rest[2 * dim + 1]
    offset = 2 * dim + 2
    local_mean = np.column_stack(rest[offset : offset + dim])
    local_variances = np.column_stack(rest[offset + dim : offset + 2 * dim])
    local_error = rest[offset + 2 * dim + 1]
    received, accepted, overwritten, events, terminated = rest[offset + 2 * dim + 2 :]
    rows = [
        analysis.RunRow(
            client=client[n],
            cycle=cycle[n],
            tick=tick[n],
            social_mean=social_mean[n],
            social_variances=social_variances[n],
            social_error=social_error[n],
            local_mean=local_mean[n],
            local_variances=local_variances[n],
            local_error=local_error[n],
            received=received[n],
            accepted=accepted[n],
            overwritten=overwritten[n],
            events=events[n],
            terminated=terminated[n],
        )
        for n in range(len(client))
    ]
    return analysis.RunRecord(rows, dim, clients, compromised)


def record_to_dict(record):
    return collections.OrderedDict(
        [
            ("dim", record.dim),
            ("clients", list(record.clients)),
            ("compromised", list(record.compromised)),
            (
                "rows",
                [
                    collections.OrderedDict(
                        [
                            ("client", row.client),
                            ("cycle", row.cycle),
                            ("tick", row.tick),
                            ("social_mean", row.social_mean.tolist()),
                            ("social_variances", row.social_variances.tolist()),
                            ("social_error", row.social_error),
                            ("local_mean", row.local_mean.tolist()),
                            ("local_variances", row.local_variances.tolist()),
                            ("local_error", row.local_error),
                            ("received", list(row.received)),
                            ("accepted", list(row.accepted)),
                            ("overwritten", list(row.overwritten)),
                            ("events", list(row.events)),
                            ("terminated", row.terminated),
                        ]
                    )
                    for row in record.rows
                ],
            ),
        ]
    )


def record_from_dict(data):
    rows = []
    for n, entry in enumerate(data["rows"]):
        try:
            rows.append(
                analysis.RunRow(
                    client=int(entry["client"]),
                    cycle=int(entry["cycle"]),
                    tick=int(entry["tick"]),
                    social_mean=np.array(entry["social_mean"], dtype=float),
                    social_variances=np.array(entry["social_variances"], dtype=float),
                    social_error=float(entry["social_error"]),
                    local_mean=np.array(entry["local_mean"], dtype=float),
                    local_variances=np.array(entry["local_variances"], dtype=float),
                    local_error=float(entry["local_error"]),
                    received=tuple(entry["received"]),
                    accepted=tuple(entry["accepted"]),
                    overwritten=tuple(entry["overwritten"]),
                    events=tuple(entry["events"]),
                    terminated=bool(entry["terminated"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed record row {n}: {exc}") from exc
    return analysis.RunRecord(rows, data["dim"], data["clients"], data["compromised"])


def save_record(record, directory, output_format="csv"):
    """Write a record as ``records.csv`` or ``records.json`` in ``directory``.

    Returns
    -------
    path : str
    """
    path = os.path.join(directory, f"{RECORD_STEM}.{output_format}")
    if output_format == "csv":
        save_record_csv(record, path)
    elif output_format == "json":
        save_json(record_to_dict(record), path)
    else:
        raise util.ConfigurationError(f"output format must be one of {FORMATS}, got {output_format!r}")
    return path


def load_record(path):
    """Read a record file, choosing the parser by extension."""
    if str(path).endswith(".json"):
        return record_from_dict(load_json(path))
    return load_record_csv(path)


def find_record(directory):
    """Path of the record file in a run directory."""
    for output_format in FORMATS:
        path = os.path.join(directory, f"{RECORD_STEM}.{output_format}")
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"no {RECORD_STEM}.csv or {RECORD_STEM}.json in {directory}")
