"""Reader for the plain-text model definition format.

Layout (INI style, '#' comments, indented continuation lines)::

    [system]
    dim = 2
    K = 0 0  0 0          # row-major (re, im) pairs, d*d of them
        0 0  1 0
    cluster_tol = 1e-9    # optional

    [channel.1]           # Bohr frequency omega after the dot
    interval = 0.5 1.5
    multiplicity = 1      # optional, default 1
    profile = flat        # flat | lorentzian | gaussian
    c = 0.2               # profile parameters: c, center, width, sigma
    coupling = ...        # (d*m) x d matrix as row-major (re, im) pairs

    [tail.upper]          # off-resonant piece, same keys as a channel
    ...

    [discretization]
    rule = midpoint       # midpoint | gauss
    modes_per_channel = 24
    tail_modes = 24       # optional

Instead of profile/coupling a channel may give ``table``: one row per node,
``x`` followed by the (d*m) x d matrix as (re, im) pairs. Values between
nodes are linearly interpolated.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .system_model import (PROFILES, Channel, FormFactor, ReservoirModel,
                           spectral_decompose)


class ModelFileError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    model: ReservoirModel
    rule: str
    modes_per_channel: int
    tail_modes: int
    source: str


_SECTION = re.compile(r"^\s*\[([^\]]+)\]")
_KEY = re.compile(r"^([A-Za-z_][\w\-]*)\s*=")


def _line_index(text: str) -> dict:
    where, section = {}, None
    for n, line in enumerate(text.splitlines(), start=1):
        m = _SECTION.match(line)
        if m:
            section = m.group(1).strip()
            where[(section, None)] = n
            continue
        m = _KEY.match(line)
        if m and section is not None:
            where[(section, m.group(1))] = n
    return where


class _Reader:
    def __init__(self, text: str, source: str):
        self.source = source
        self.where = _line_index(text)
        self.cp = configparser.ConfigParser(inline_comment_prefixes=("#",),
                                            interpolation=None)
        self.cp.optionxform = str
        try:
            self.cp.read_string(text, source=source)
        except configparser.Error as exc:
            line = getattr(exc, "lineno", "?")
            raise ModelFileError(f"{source}:{line}: syntax error: {exc}") from None

    def fail(self, section, key, msg):
        line = self.where.get((section, key), self.where.get((section, None), "?"))
        field = f"[{section}]" + (f" {key}" if key else "")
        raise ModelFileError(f"{self.source}:{line}: {field}: {msg}")

    def get(self, section, key, default=None, required=True):
        if self.cp.has_option(section, key):
            return self.cp.get(section, key)
        if required and default is None:
            self.fail(section, key, "missing required field")
        return default

    def numbers(self, section, key, count=None):
        raw = self.get(section, key)
        try:
            vals = np.array([float(t) for t in raw.split()])
        except ValueError:
            self.fail(section, key, f"expected numbers, got {raw!r}")
        if count is not None and len(vals) != count:
            self.fail(section, key, f"expected {count} numbers, got {len(vals)}")
        return vals

    def scalar(self, section, key, kind=float, default=None):
        raw = self.get(section, key, default=default, required=default is None)
        try:
            return kind(raw)
        except (TypeError, ValueError):
            self.fail(section, key, f"cannot read {raw!r} as {kind.__name__}")


def _complex_matrix(vals, shape):
    pairs = vals.reshape(-1, 2)
    return (pairs[:, 0] + 1j * pairs[:, 1]).reshape(shape)


def _piece(r: _Reader, section: str, omega, d: int) -> Channel:
    interval = r.numbers(section, "interval", 2)
    m = r.scalar(section, "multiplicity", int, default="1")
    if m < 1:
        r.fail(section, "multiplicity", "must be >= 1")
    shape = (d * m, d)
    has_table = r.cp.has_option(section, "table")
    has_profile = r.cp.has_option(section, "profile")
    if has_table == has_profile:
        r.fail(section, None, "give exactly one of 'profile' or 'table'")
    if has_profile:
        name = r.get(section, "profile").strip()
        if name not in PROFILES:
            r.fail(section, "profile", f"unknown profile {name!r}; "
                   f"choose from {sorted(PROFILES)}")
        factory, params = PROFILES[name]
        args = [r.scalar(section, p) for p in params]
        coupling = _complex_matrix(r.numbers(section, "coupling", 2 * d * m * d), shape)
        ff = FormFactor(shape, profile=factory(*args), coupling=coupling, label=name)
    else:
        vals = r.numbers(section, "table")
        width = 1 + 2 * d * m * d
        if len(vals) % width:
            r.fail(section, "table", f"rows must hold {width} numbers each")
        rows = vals.reshape(-1, width)
        try:
            ff = FormFactor(shape, nodes=rows[:, 0],
                            table=_complex_matrix(rows[:, 1:].ravel(),
                                                  (len(rows),) + shape),
                            label="table")
        except ValueError as exc:
            r.fail(section, "table", str(exc))
    if not interval[1] > interval[0]:
        r.fail(section, "interval", "empty interval")
    return Channel(omega, (float(interval[0]), float(interval[1])), m, ff)


def parse_model(text: str, source: str = "<model>") -> ModelSpec:
    r = _Reader(text, source)
    if not r.cp.has_section("system"):
        raise ModelFileError(f"{source}:?: [system]: missing section")
    d = r.scalar("system", "dim", int)
    if d < 1:
        r.fail("system", "dim", "must be >= 1")
    K = _complex_matrix(r.numbers("system", "K", 2 * d * d), (d, d))
    tol = r.scalar("system", "cluster_tol", float, default="1e-9")
    try:
        sys = spectral_decompose(K, tol)
    except ValueError as exc:
        r.fail("system", "K", str(exc))

    channels, tails = [], []
    for sec in r.cp.sections():
        if sec.startswith("channel."):
            try:
                omega = float(sec.split(".", 1)[1])
            except ValueError:
                r.fail(sec, None, "section name must be channel.<omega>")
            channels.append(_piece(r, sec, omega, d))
        elif sec.startswith("tail."):
            tails.append(_piece(r, sec, None, d))
        elif sec not in ("system", "discretization"):
            r.fail(sec, None, "unknown section")

    rule = r.get("discretization", "rule", default="midpoint", required=False) \
        if r.cp.has_section("discretization") else "midpoint"
    if rule not in ("midpoint", "gauss"):
        r.fail("discretization", "rule", f"unknown rule {rule!r}")
    has_disc = r.cp.has_section("discretization")
    n = r.scalar("discretization", "modes_per_channel", int, default="24") \
        if has_disc else 24
    if n < 2:
        r.fail("discretization", "modes_per_channel", "must be >= 2")
    nt = r.scalar("discretization", "tail_modes", int, default=str(n)) \
        if has_disc else n

    name = Path(source).stem
    try:
        model = ReservoirModel(sys, tuple(sorted(channels, key=lambda c: c.omega)),
                               tuple(tails), name=name)
    except ValueError as exc:
        raise ModelFileError(f"{source}:?: model: {exc}") from None
    return ModelSpec(model, rule, n, nt, source)


def bundled_models() -> list:
    root = resources.files("wcl_lab") / "models"
    return sorted(p.name[:-6] for p in root.iterdir() if p.name.endswith(".model"))


def model_text(name_or_path: str) -> tuple:
    """Return (text, source) for a bundled model name or a file path."""
    p = Path(name_or_path)
    if p.suffix == ".model" and p.exists():
        return p.read_text(), str(p)
    if p.exists() and p.is_file():
        return p.read_text(), str(p)
    res = resources.files("wcl_lab") / "models" / f"{name_or_path}.model"
    if res.is_file():
        return res.read_text(), f"{name_or_path}.model"
    raise ModelFileError(f"{name_or_path}:?: model not found "
                         f"(bundled: {', '.join(bundled_models())})")


def load_model(name_or_path: str) -> ModelSpec:
    text, source = model_text(name_or_path)
    return parse_model(text, source)
