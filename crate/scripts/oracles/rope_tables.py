"""Enumerates the 3D-RoPE index table of identity-prompt layouts.

Writes one TSV per layout plus an index of the layouts to
crates/core/tests/data/rope/. Written independently of the Rust code: it
expands the template by hand and walks the blocks with explicit counters.
"""
import json
import pathlib
import re

OUT = pathlib.Path(__file__).resolve().parents[2] / "crates/core/tests/data/rope"

LAYOUTS = [
    {"name": "man_guitar", "prompt": "A man is playing guitar",
     "subjects": [{"word": "man", "sem": [2, 2], "vae": [2, 2]},
                  {"word": "guitar", "sem": [2, 2], "vae": [2, 2]}]},
    {"name": "dog_single", "prompt": "A dog runs on the beach",
     "subjects": [{"word": "dog", "sem": [2, 2], "vae": [2, 2]}]},
    {"name": "three_mixed", "prompt": "Three friends share a meal!",
     "subjects": [{"word": "girl", "sem": [3, 2], "vae": [2, 3]},
                  {"word": "boy", "sem": [1, 1], "vae": [4, 4]},
                  {"word": "dog", "sem": [4, 4], "vae": [1, 2]}]},
    {"name": "no_subject", "prompt": "A quiet street at night", "subjects": []},
    {"name": "cat_default", "prompt": "a cat sleeps", "subjects": [{"word": "cat", "sem": [4, 4], "vae": [4, 4]}]},
]


def words(text):
    return re.findall(r"<SEP>|[.,!?;:]|[^\s.,!?;:<]+", text)


def grid(t, w, h):
    return [(t, i // h - w // 2, i % h - h // 2) for i in range(w * h)]


def table(layout):
    subs = layout["subjects"]
    prompt = layout["prompt"].strip()
    if not subs:
        runs = [words(prompt)]
    else:
        head = words(prompt)
        if head[-1] not in (".", "!", "?"):
            head.append(".")
        head += ["<SEP>", "The", subs[0]["word"], "looks", "like"]
        runs = [head] + [[".", "The", s["word"], "looks", "like"] for s in subs[1:]]
    rows = []
    t = 1
    vae_t = []
    for k, run in enumerate(runs):
        for _ in run:
            rows.append(("TEXT", "-", (t, 0, 0)))
            t += 1
        if k < len(subs):
            m = t - 1
            w, h = subs[k]["sem"]
            rows += [("IMG_SEM", str(k), idx) for idx in grid(m + 1, w, h)]
            vae_t.append(m + 2)
            t = m + 3
    for k, s in enumerate(subs):
        w, h = s["vae"]
        rows += [("IMG_VAE", str(k), idx) for idx in grid(vae_t[k], w, h)]
    lines = ["seq_pos\tkind\tsubject_id\tt\ty\tx"]
    for pos, (kind, sid, (tt, y, x)) in enumerate(rows, start=1):
        lines.append(f"{pos}\t{kind}\t{sid}\t{tt}\t{y}\t{x}")
    return "\n".join(lines) + "\n"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for layout in LAYOUTS:
        (OUT / f"{layout['name']}.tsv").write_text(table(layout))
    (OUT / "layouts.json").write_text(json.dumps(LAYOUTS, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
