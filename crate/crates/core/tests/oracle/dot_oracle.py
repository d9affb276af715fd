#!/usr/bin/env python3
"""Parse exported DOT with pydot (an independent grammar implementation)
and write a JSON summary of what it read: graph type, node ids with
labels, and edges with their labels. The summaries are frozen next to the
DOT goldens. Run: python3 dot_oracle.py  (needs `pip install pydot`)
"""
import json
import os

import pydot

HERE = os.path.dirname(os.path.abspath(__file__))
FIX = os.path.normpath(os.path.join(HERE, "..", "..", "fixtures", "amd_graph"))


def unquote(s):
    # pydot keeps DOT quoting; undo the one escape the grammar defines.
    if s.startswith('"') and s.endswith('"'):
        s = s[1:-1].replace('\\"', '"')
    return s


def label_text(s):
    # Renderers then read \\ as a literal backslash in labels.
    return unquote(s).replace("\\\\", "\\")


def summarize(path):
    (g,) = pydot.graph_from_dot_file(path, encoding="utf-8")
    nodes = sorted((
        {"id": unquote(n.get_name()), "label": label_text(n.get("label")), "shape": n.get("shape")}
        for n in g.get_nodes() if n.get_name() not in ("node", "edge", "graph")
    ), key=lambda n: n["id"])
    edges = [
        {"from": unquote(e.get_source()), "to": unquote(e.get_destination()),
         "label": label_text(e.get("label")), "count": int(e.get("count"))}
        for e in g.get_edges()
    ]
    return {"directed": g.get_type() == "digraph", "nodes": nodes, "edges": edges}


def main():
    for stem in ("expected_kg", "escapes"):
        summary = summarize(os.path.join(FIX, stem + ".dot"))
        with open(os.path.join(FIX, stem + ".dot.parsed.json"), "w", encoding="utf-8") as f:
            f.write(json.dumps(summary, indent=2, ensure_ascii=False) + "\n")
        print(stem, len(summary["nodes"]), "nodes", len(summary["edges"]), "edges")


if __name__ == "__main__":
    main()
