"""Command-line front end.

Subcommands compose the pipeline: `synth` (phantom generation), `track`
(bubble tracking), `flow` (displacement estimation), `forward` (elasticity
solve), `invert` (parameter reconstruction), `eval` (field comparison) and
`render` (PGM/quiver export).  Exit codes: 0 success, 1 usage error, 2
runtime error (missing files, malformed formats, solver failures).

Lame fields on disk are directories holding `lambda.f64grid` and
`mu.f64grid`.  The SPECKLEFLOW_THREADS environment variable (0 = auto)
caps internal parallelism; all computations here are deterministic
regardless of its value.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import flow as flowmod
from . import invert as invertmod
from .elastic import (LameField, forward_solve, read_bc_config,
                      write_bc_config, young_modulus)
from .errors import DomainError, FormatError, SpeckleFlowError
from .grids import ScalarGrid, VectorGrid, Volume, read_f64grid, write_f64grid
from .phantom import PhantomSpec, make_inclusion_phantom, make_moving_squares
from .speckle import (read_samples_csv, run_tracking, tracking_config,
                      write_samples_csv)

__all__ = ["main", "read_lame_dir", "write_lame_dir", "read_pgm", "write_pgm"]


class _UsageError(SystemExit):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"usage error: {message}", file=sys.stderr)
        raise _UsageError(1)


# ---------------------------------------------------------------------------
# small formats and helpers


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary PGM, rows written in storage order."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    byte = np.round(255.0 * scaled).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii"))
        f.write(byte.tobytes())


def read_pgm(path) -> ScalarGrid:
    with open(path, "rb") as f:
        raw = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            nl = raw.find(b"\n", pos)
            pos = len(raw) if nl < 0 else nl + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if pos == start:
            raise FormatError("truncated PGM header", offset=pos)
        fields.append((start, raw[start:pos]))
    if fields[0][1] != b"P5":
        raise FormatError("not a binary PGM (P5) file", offset=fields[0][0])
    try:
        w, h, maxval = (int(fields[i][1]) for i in (1, 2, 3))
    except ValueError:
        raise FormatError("non-integer PGM header field", offset=fields[1][0])
    if maxval != 255:
        raise FormatError("only 8-bit PGM supported", offset=fields[3][0])
    pos += 1  # single whitespace after maxval
    if len(raw) - pos < w * h:
        raise FormatError("PGM payload truncated", offset=len(raw))
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return ScalarGrid(w, h, data.reshape(h, w).astype(np.float64) / 255.0)


def write_lame_dir(path, lame: LameField) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    write_f64grid(d / "lambda.f64grid", lame.lam)
    write_f64grid(d / "mu.f64grid", lame.mu)


def read_lame_dir(path) -> LameField:
    d = Path(path)
    lam = read_f64grid(d / "lambda.f64grid")
    mu = read_f64grid(d / "mu.f64grid")
    if not isinstance(lam, ScalarGrid) or not isinstance(mu, ScalarGrid):
        raise FormatError(f"{path}: Lame components must be scalar grids")
    return LameField(lam, mu)


def _as_volume(obj) -> Volume:
    if isinstance(obj, Volume):
        return obj
    if isinstance(obj, ScalarGrid):
        return Volume.from_array(obj.data)
    raise FormatError("expected a scalar volume")


def _as_scalar(obj, what) -> ScalarGrid:
    if isinstance(obj, ScalarGrid):
        return obj
    raise FormatError(f"{what} must be a scalar grid")


def _as_vector(obj, what) -> VectorGrid:
    if isinstance(obj, VectorGrid):
        return obj
    raise FormatError(f"{what} must be a 2-component field")


# ---------------------------------------------------------------------------
# subcommand implementations


def _cmd_synth(args):
    spec = PhantomSpec.from_config(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if spec.kind == "moving_squares":
        i1, i2, true_flow, samples = make_moving_squares(spec)
        write_f64grid(out / "i1.f64grid", i1)
        write_f64grid(out / "i2.f64grid", i2)
        write_f64grid(out / "flow_true.f64grid", true_flow)
        write_samples_csv(out / "samples.csv", samples)
    else:
        lame, bc, u_true, i1, i2, samples = make_inclusion_phantom(spec)
        write_lame_dir(out / "lame", lame)
        write_bc_config(out / "bc.cfg", bc)
        write_f64grid(out / "u_true.f64grid", u_true)
        write_f64grid(out / "i1.f64grid", i1)
        write_f64grid(out / "i2.f64grid", i2)
        write_samples_csv(out / "samples.csv", samples)
    return 0


def _cmd_track(args):
    v1 = _as_volume(read_f64grid(args.a))
    v2 = _as_volume(read_f64grid(args.b))
    crit, top_fraction, presmooth = tracking_config(args.config)
    samples = run_tracking(v1, v2, crit, top_fraction, presmooth)
    write_samples_csv(args.out, samples)
    return 0


def _cmd_flow(args):
    i1 = _as_scalar(read_f64grid(args.i1), "i1")
    i2 = _as_scalar(read_f64grid(args.i2), "i2")
    samples = read_samples_csv(args.samples) if args.samples else []
    params = flowmod.FlowParams.from_config(args.config)
    u = flowmod.multiscale_flow(i1, i2, samples, params)
    write_f64grid(args.out, u)
    return 0


def _cmd_forward(args):
    lame = read_lame_dir(args.lame)
    bc = read_bc_config(args.bc)
    u = forward_solve(lame, bc)
    write_f64grid(args.out, u)
    return 0


def _cmd_invert(args):
    udelta = _as_vector(read_f64grid(args.data), "data")
    bc = read_bc_config(args.bc)
    from .config import read_kv_config
    raw = read_kv_config(args.config)
    mask = None
    if "mask_file" in raw:
        mask = _as_scalar(read_f64grid(raw["mask_file"]), "mask")
    cfg = invertmod.InversionConfig.from_config(args.config, mask=mask)
    lame, trace = invertmod.nesterov_iterate(cfg, udelta, bc)
    write_lame_dir(args.out, lame)
    write_f64grid(Path(args.out) / "young.f64grid", young_modulus(lame))
    if args.trace:
        invertmod.write_trace_csv(args.trace, trace)
    return 0


def _cmd_eval(args):
    est = _as_vector(read_f64grid(args.est), "est")
    truth = _as_vector(read_f64grid(args.truth), "truth")
    total, ex, ey = invertmod.field_error(est, truth)
    print(f"{total:.17g},{ex:.17g},{ey:.17g}")
    return 0


def _cmd_render(args):
    obj = read_f64grid(args.infile)
    out = Path(args.out)
    quiver = out.with_suffix(out.suffix + ".quiver.csv")
    if isinstance(obj, VectorGrid):
        mag = np.hypot(obj.data[:, :, 0], obj.data[:, :, 1])
        write_pgm(out, mag)
        step = max(1, min(obj.nx, obj.ny) // 16)
        lines = ["x,y,ux,uy"]
        for iy in range(0, obj.ny, step):
            for ix in range(0, obj.nx, step):
                ux, uy = obj.data[iy, ix]
                lines.append(f"{ix},{iy},{ux:.17g},{uy:.17g}")
        quiver.write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        data = obj.data if isinstance(obj, ScalarGrid) else obj.data.reshape(-1, obj.nx)
        write_pgm(out, np.abs(data))
        quiver.write_text("x,y,ux,uy\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="speckleflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate phantom data")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("track", help="bubble tracking on a volume pair")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("flow", help="displacement field estimation")
    p.add_argument("--i1", required=True)
    p.add_argument("--i2", required=True)
    p.add_argument("--samples", default=None)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_flow)

    p = sub.add_parser("forward", help="linearized elasticity solve")
    p.add_argument("--lame", required=True)
    p.add_argument("--bc", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_forward)

    p = sub.add_parser("invert", help="Lame parameter reconstruction")
    p.add_argument("--data", required=True)
    p.add_argument("--bc", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", default=None)
    p.set_defaults(func=_cmd_invert)

    p = sub.add_parser("eval", help="relative errors between two fields")
    p.add_argument("--est", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("render", help="export a field as PGM + quiver CSV")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_render)

    return parser


def _check_thread_env() -> None:
    raw = os.environ.get("SPECKLEFLOW_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise DomainError(f"SPECKLEFLOW_THREADS must be an integer, got '{raw}'")
    if n < 0:
        raise DomainError("SPECKLEFLOW_THREADS must be nonnegative")


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    try:
        _check_thread_env()
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename}", file=sys.stderr)
        return 2
    except SpeckleFlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
