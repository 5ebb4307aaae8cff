#!/usr/bin/env python3
"""Group a JSONL benchmark report into QPS-vs-recall series, one per
(index, beam width, concurrency). Writes JSON, or CSV with --csv."""

import argparse
import csv
import json
import sys
from collections import defaultdict

SCHEMA_VERSION = 1


def load(stream):
    lines = [l for l in stream if l.strip()]
    if not lines:
        raise ValueError("empty report")
    header = json.loads(lines[0])
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema version {header.get('schema_version')}")
    records = [json.loads(l) for l in lines[1:]]
    if len(records) != header.get("reports"):
        raise ValueError(f"header announces {header.get('reports')} reports, found {len(records)}")
    return records


def series(records):
    groups = defaultdict(list)
    for r in records:
        if not r["valid"]:
            continue
        key = (r["family"], r["index_id"], r["beam_width"], r["concurrency"], r["param_name"])
        groups[key].append(r)
    out = []
    for (family, index_id, beam, conc, param), cells in sorted(groups.items(), key=lambda kv: repr(kv[0])):
        cells.sort(key=lambda r: r["param_value"])
        out.append(
            {
                "family": family,
                "index_id": index_id,
                "beam_width": beam,
                "concurrency": conc,
                "param_name": param,
                "points": [
                    {"param_value": r["param_value"], "recall": r["mean_recall"], "qps": r["qps"]}
                    for r in cells
                ],
            }
        )
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("report", nargs="?", help="JSONL report (default: stdin)")
    ap.add_argument("--csv", action="store_true", help="one row per point instead of JSON")
    args = ap.parse_args(argv)
    if args.report:
        with open(args.report) as f:
            records = load(f)
    else:
        records = load(sys.stdin)
    out = series(records)
    if args.csv:
        w = csv.writer(sys.stdout)
        w.writerow(["family", "index_id", "beam_width", "concurrency", "param_name", "param_value", "recall", "qps"])
        for s in out:
            for p in s["points"]:
                w.writerow(
                    [s["family"], s["index_id"], s["beam_width"] or "", s["concurrency"], s["param_name"],
                     p["param_value"], p["recall"], p["qps"]]
                )
    else:
        json.dump({"series": out}, sys.stdout, indent=2)
        sys.stdout.write("\n")


if __name__ == "__main__":
    main()
