"""Report serialization helpers: aligned text tables, deterministic JSON,
artifact checksums, and the per-run manifest."""

import hashlib
import json
from pathlib import Path


def format_table(headers, rows) -> str:
    """Aligned-column text table; numbers are right-aligned."""
    def cell(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    grid = [[cell(v) for v in row] for row in rows]
    widths = [
        max(len(headers[c]), *(len(r[c]) for r in grid)) if grid else len(headers[c])
        for c in range(len(headers))
    ]

    def align(row, raw_row):
        out = []
        for c, text in enumerate(row):
            numeric = isinstance(raw_row[c], (int, float)) and not isinstance(raw_row[c], bool)
            out.append(text.rjust(widths[c]) if numeric else text.ljust(widths[c]))
        return "  ".join(out).rstrip()

    lines = ["  ".join(h.ljust(widths[c]) for c, h in enumerate(headers)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += [align(r, raw) for r, raw in zip(grid, rows)]
    return "\n".join(lines) + "\n"


def dump_json(obj, path) -> None:
    """Write canonical JSON: sorted keys, stable separators, trailing newline."""
    Path(path).write_text(
        json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path, command: str, args: dict, config_snapshot: dict,
                   seeds, inputs=(), outputs=()) -> None:
    """Record everything needed to reproduce a run bit-exactly: the resolved
    config, every seed, and checksums of all input and output artifacts.
    Deliberately contains no timestamps so reruns are byte-identical."""
    manifest = {
        "command": command,
        "args": args,
        "config": config_snapshot,
        "seeds": list(seeds),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "format_version": 1,
    }
    dump_json(manifest, path)
