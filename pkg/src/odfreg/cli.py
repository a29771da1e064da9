"""Command-line interface: ``odfreg phantom|register|apply|evaluate|render``.

Config and spec files are ``key = value`` text (an optional ``[section]``
header is accepted).  Every command writes its outputs through a temporary
file and an atomic rename, and leaves a ``manifest.json`` next to them.

Exit codes
----------
0  success
2  usage error (bad arguments, unknown or missing configuration keys)
3  data-format error (unreadable ODFF file, sampling or grid mismatch)
4  numerical failure (folded deformation, inverse map too inaccurate,
   line search unable to make any progress)
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import sys
import time
import zipfile
from pathlib import Path

import numpy as np

from . import __version__, backend
from .deformation import InverseResidualError
from .evaluation import dice, skl_map, support_mask
from .fields import (ODFFormatError, PhantomSpec, PhantomSpecError, atomic_write_bytes,
                     encode_field, load_field, make_phantom)
from .optimize import ConfigError, RegistrationConfig, register
from .reorient import InvalidAffineError, group_action
from .render import SliceError, encode_png, parse_slice, render_slice, render_svg
from .sphere import IncompatibleSamplingError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("odfreg")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


# ---------------------------------------------------------------------------
# small file helpers

def read_key_values(path, section: str = "odfreg") -> dict:
    """Read a ``key = value`` file into a dict of strings."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    if not any(line.lstrip().startswith("[") for line in text.splitlines()):
        text = f"[{section}]\n" + text
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str  # keys are case-sensitive (sigma_V)
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    out = {}
    for sec in cp.sections():
        out.update(cp[sec])
    return out


def write_npz_bytes(arrays: dict) -> bytes:
    """``.npz`` archive with fixed timestamps so identical arrays give identical bytes."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w") as fh:
                np.lib.format.write_array(fh, np.ascontiguousarray(arrays[name]),
                                          allow_pickle=False)
    return buf.getvalue()


def write_manifest(out_dir, command, config, inputs, outputs, started, diagnostics=None):
    manifest = {
        "command": command,
        "version": __version__,
        "backend": backend.NAME,
        "threads": backend.get_threads(),
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seconds": round(time.perf_counter() - started, 6),
        "diagnostics": diagnostics or {},
    }
    data = json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n"
    atomic_write_bytes(Path(out_dir) / "manifest.json", data.encode())


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def _load(path):
    try:
        return load_field(path)
    except FileNotFoundError:
        raise UsageError(f"{path}: no such file") from None
    except ODFFormatError as exc:
        raise DataError(f"{path}: {exc}") from None


def _same_grid(a, b, what):
    if a.sampling != b.sampling:
        raise DataError(f"{what}: fields use different sphere samplings")
    if a.dims != b.dims or a.voxel_size != b.voxel_size:
        raise DataError(f"{what}: fields live on different grids")


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {p}: {exc.strerror}") from None
    return p


def _apply_threads(config_threads: int = 0):
    env = os.environ.get("ODFREG_THREADS")
    if env:
        backend.set_threads(int(env))
    elif config_threads:
        backend.set_threads(config_threads)


# ---------------------------------------------------------------------------
# commands

def cmd_phantom(args):
    started = time.perf_counter()
    items = read_key_values(args.spec, "phantom")
    try:
        spec = PhantomSpec.from_mapping(items)
        fld = make_phantom(spec)
    except PhantomSpecError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    if out.parent != Path(""):
        _out_dir(out.parent)
    atomic_write_bytes(out, encode_field(fld))
    write_manifest(out.parent, "phantom", spec.to_mapping(), [args.spec], [out], started,
                   {"support_voxels": int(fld.mask.sum()) if fld.mask is not None else None})
    return EXIT_OK


def load_bundle(path):
    """Arrays of a registration output directory (or its ``deformation.npz``)."""
    p = Path(path)
    if p.is_dir():
        p = p / "deformation.npz"
    try:
        with np.load(p, allow_pickle=False) as z:
            return {k: z[k] for k in z.files}
    except FileNotFoundError:
        raise UsageError(f"{p}: no such file") from None
    except (ValueError, OSError, zipfile.BadZipFile) as exc:
        raise DataError(f"{p}: not a deformation bundle ({exc})") from None


def cmd_register(args):
    started = time.perf_counter()
    items = read_key_values(args.config, "register")
    try:
        config = RegistrationConfig.from_mapping(items, required=("lambda", "sigma_V"))
    except ConfigError as exc:
        raise UsageError(f"config: {exc}") from None
    template, target = _load(args.template), _load(args.target)
    _same_grid(template, target, "register")
    _apply_threads(config.threads)
    config.threads = 0  # already applied; keeps the environment override in force
    try:
        result = register(template, target, config)
    except (InvalidAffineError, InverseResidualError) as exc:
        raise NumericalError(str(exc)) from None
    if result.reason == "stalled" and result.iterations == 0:
        raise NumericalError("line search found no decrease from the initial momentum")

    out = _out_dir(args.out_dir)
    traj, m = result.trajectory, result.momentum
    files = {
        out / "momentum.npz": write_npz_bytes({"alpha": m.alpha, "support": m.support}),
        out / "deformation.npz": write_npz_bytes({
            "phi1": traj.endpoint, "phi1_inv": traj.inverse, "jacobians": traj.jacobians,
            "dims": np.array(template.dims), "voxel_size": np.array(template.voxel_size)}),
        out / "deformed.odff": encode_field(result.deformed),
        out / "trace.csv": _trace_csv(result.trace),
    }
    for path, data in files.items():
        atomic_write_bytes(path, data)
    diag = dict(result.diagnostics, reason=result.reason, iterations=result.iterations,
                initial_J=result.trace[0]["J"], final_J=result.trace[-1]["J"])
    write_manifest(out, "register", config.to_mapping(), [args.template, args.target,
                   args.config], list(files), started, diag)
    return EXIT_OK


def _trace_csv(trace) -> bytes:
    buf = io.StringIO()
    cols = ["iteration", "J", "energy", "matching", "step", "grad_norm"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for rec in trace:
        w.writerow([rec["iteration"]] + [repr(float(rec[c])) for c in cols[1:]])
    return buf.getvalue().encode()


def cmd_apply(args):
    started = time.perf_counter()
    bundle = load_bundle(args.bundle)
    fld = _load(args.field)
    dims = tuple(int(d) for d in bundle.get("dims", ()))
    vs = tuple(float(v) for v in bundle.get("voxel_size", ()))
    if dims != fld.dims or vs != fld.voxel_size or "phi1_inv" not in bundle:
        raise DataError("apply: deformation and field live on different grids")
    try:
        out_fld = group_action(fld, bundle["phi1_inv"])
    except InvalidAffineError as exc:
        raise NumericalError(str(exc)) from None
    out = Path(args.out)
    if out.parent != Path(""):
        _out_dir(out.parent)
    atomic_write_bytes(out, encode_field(out_fld))
    write_manifest(out.parent, "apply", {}, [args.bundle, args.field], [out], started)
    return EXIT_OK


def cmd_evaluate(args):
    started = time.perf_counter()
    a, b = _load(args.a), _load(args.b)
    _same_grid(a, b, "evaluate")
    if args.mask:
        mask = _load(args.mask).mask
        if mask is None or mask.shape != a.dims:
            raise DataError(f"{args.mask}: field carries no usable mask")
    elif a.mask is not None or b.mask is not None:
        mask = np.zeros(a.dims, dtype=bool)
        for f in (a, b):
            if f.mask is not None:
                mask |= f.mask
    else:
        mask = None
    rep = skl_map(a, b, mask)
    ma = a.mask if a.mask is not None else support_mask(a)
    mb = b.mask if b.mask is not None else support_mask(b)
    values = rep.to_mapping()
    values["dice"] = repr(dice(ma, mb))
    out = _out_dir(args.out_dir)
    report = "".join(f"{k} = {values[k]}\n" for k in sorted(values)).encode()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["skl", "fraction"])
    for x, y in zip(rep.cdf_x, rep.cdf_y):
        w.writerow([repr(float(x)), repr(float(y))])
    files = {out / "report.txt": report, out / "cdf.csv": buf.getvalue().encode()}
    for path, data in files.items():
        atomic_write_bytes(path, data)
    write_manifest(out, "evaluate", {}, [args.a, args.b] + ([args.mask] if args.mask else []),
                   list(files), started, values)
    return EXIT_OK


def cmd_render(args):
    started = time.perf_counter()
    fld = _load(args.field)
    try:
        axis, index = parse_slice(args.slice, fld.dims)
        if args.out.lower().endswith(".svg"):
            data = render_svg(fld, axis, index, cell=args.cell).encode()
        else:
            data = encode_png(render_slice(fld, axis, index, cell=args.cell))
    except SliceError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    if out.parent != Path(""):
        _out_dir(out.parent)
    atomic_write_bytes(out, data)
    write_manifest(out.parent, "render", {"slice": args.slice, "cell": args.cell},
                   [args.field], [out], started)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="odfreg", description="Diffeomorphic registration of square-root ODF fields.",
        epilog="exit codes: 0 success, 2 usage, 3 data format, 4 numerical failure "
               "(fold, inverse residual, stalled line search)",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"odfreg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate a synthetic ODF field")
    s.add_argument("spec", help="phantom spec file (key = value)")
    s.add_argument("out", help="output ODFF file")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("register", help="register a template field onto a target field")
    s.add_argument("template")
    s.add_argument("target")
    s.add_argument("config", help="registration config (key = value; lambda and sigma_V "
                                  "are required)")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("apply", help="deform a field with a registration result")
    s.add_argument("bundle", help="registration output directory or its deformation.npz")
    s.add_argument("field")
    s.add_argument("out")
    s.set_defaults(func=cmd_apply)

    s = sub.add_parser("evaluate", help="sKL map summary and Dice overlap of two fields")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("out_dir")
    s.add_argument("--mask", help="ODFF file whose mask restricts the sKL summary")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("render", help="draw ODF glyphs of one slice (PNG or SVG)")
    s.add_argument("field")
    s.add_argument("slice", help="axis=index, e.g. z=16 (index defaults to the middle)")
    s.add_argument("out", help="output .png or .svg")
    s.add_argument("--cell", type=int, default=24, help="pixels per voxel (default 24)")
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"odfreg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, IncompatibleSamplingError) as exc:
        print(f"odfreg {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"odfreg {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
