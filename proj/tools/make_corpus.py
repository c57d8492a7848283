#!/usr/bin/env python3
"""Writes a byte corpus built from the Python standard library's sources.

Files are taken in sorted path order and concatenated until the target size
is reached, so the output depends only on the interpreter's stdlib.
"""

import argparse
import pathlib
import sysconfig


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("output", type=pathlib.Path)
    parser.add_argument("--bytes", type=int, default=8 << 20, help="corpus size (default 8 MiB)")
    args = parser.parse_args()

    root = pathlib.Path(sysconfig.get_paths()["stdlib"])
    sources = sorted(p for p in root.rglob("*.py") if "site-packages" not in p.parts)
    out = bytearray()
    for path in sources:
        if len(out) >= args.bytes:
            break
        try:
            out += path.read_bytes()
        except OSError:
            continue
    if len(out) < args.bytes:
        raise SystemExit(f"only {len(out)} bytes of stdlib source under {root}")
    args.output.parent.mkdir(parents=True, exist_ok=True)
    args.output.write_bytes(bytes(out[: args.bytes]))


if __name__ == "__main__":
    main()
