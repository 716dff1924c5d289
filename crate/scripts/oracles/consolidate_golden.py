"""Builds the sample observation file and its expected consolidation manifest.

Maximum cliques come from networkx's clique enumeration (an implementation
independent of the Rust search); ties are broken by the lexicographically
smallest sorted member list.
"""
import json
import math
import pathlib
import random

import networkx as nx

OUT = pathlib.Path(__file__).resolve().parents[2] / "crates/core/tests/data/consolidate"
TAU_DIST = 0.3
TAU_CLIP = 0.25
DIM = 6

# subject -> frames it is observed in
APPEARANCES = {
    "a": range(9),
    "b": [0, 2, 4, 6, 8],
    "c": [1, 4, 7],
    "d": [0, 3, 5, 8],
    "e": [1, 2, 6, 7],
}
# (frame, subject) observations whose segmentation score fails the gate
LOW_SCORE = {(3, "b"), (5, "a")}


def build_records():
    rng = random.Random(20240611)
    protos = {}
    for k, s in enumerate(sorted(APPEARANCES)):
        v = [0.0] * DIM
        v[k] = 1.0
        protos[s] = v
    records = []
    for s in sorted(APPEARANCES):
        for f in APPEARANCES[s]:
            emb = [x + rng.gauss(0.0, 0.03) for x in protos[s]]
            score = 0.1 if (f, s) in LOW_SCORE else round(rng.uniform(0.3, 0.9), 3)
            records.append({"frame": f, "crop_ref": f"f{f}_{s}", "clip_score": score,
                            "embedding": [round(x, 6) for x in emb]})
    for f, s in LOW_SCORE:
        if f not in APPEARANCES[s]:
            records.append({"frame": f, "crop_ref": f"f{f}_{s}", "clip_score": 0.1,
                            "embedding": [round(x, 6) for x in protos[s]]})
    rng.shuffle(records)
    return records


def unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def cos_dist(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return 1.0 - dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def consolidate(records):
    total = len({r["frame"] for r in records})
    nodes = sorted(records, key=lambda r: (r["frame"], r["crop_ref"]))
    nodes = [dict(r, embedding=unit(r["embedding"])) for r in nodes if r["clip_score"] > TAU_CLIP]
    g = nx.Graph()
    g.add_nodes_from(range(len(nodes)))
    for i in range(len(nodes)):
        for j in range(i + 1, len(nodes)):
            if cos_dist(nodes[i]["embedding"], nodes[j]["embedding"]) < TAU_DIST:
                g.add_edge(i, j)
    subjects = []
    remaining = set(range(len(nodes)))
    while remaining:
        cliques = [sorted(c) for c in nx.find_cliques(g.subgraph(remaining))]
        best = min(cliques, key=lambda c: (-len(c), c))
        if 3 * len(best) <= total:
            break
        remaining -= set(best)
        rep = min(best, key=lambda m: (sum(cos_dist(nodes[m]["embedding"], nodes[o]["embedding"])
                                           for o in best if o != m), m))
        subjects.append({
            "id": len(subjects),
            "members": [{"crop_ref": nodes[m]["crop_ref"], "frame": nodes[m]["frame"]} for m in best],
            "representative": nodes[rep]["crop_ref"],
            "size": len(best),
        })
    return {"nodes": len(nodes), "records": len(records), "subjects": subjects,
            "tau_clip": TAU_CLIP, "tau_dist": TAU_DIST, "total_frames": total}


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    records = build_records()
    with open(OUT / "sample_observations.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    manifest = consolidate(records)
    (OUT / "expected_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
