#!/usr/bin/env python3
"""Build data/sample_corpus.txt: ~1 MB of English prose from the CPython
documentation that ships with the interpreter (pydoc topic pages plus module
docstrings). Distributed under the Python Software Foundation License."""
import importlib
import inspect
import pathlib
import pkgutil
import sys

from pydoc_data.topics import topics

TARGET = 1_000_000
SKIP = {"this", "antigravity", "idlelib", "tkinter", "turtle", "turtledemo"}


def main() -> None:
    out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "data/sample_corpus.txt")
    parts = [topics[k].strip() for k in sorted(topics)]
    size = sum(len(p.encode()) + 2 for p in parts)
    for mod in sorted(m.name for m in pkgutil.iter_modules([str(pathlib.Path(inspect.getfile(inspect)).parent)]) if not m.name.startswith("_")):
        if size >= TARGET:
            break
        if mod in SKIP:
            continue
        try:
            module = importlib.import_module(mod)
        except Exception:
            continue
        docs = [inspect.getdoc(module)]
        for name, obj in sorted(vars(module).items()):
            if not name.startswith("_") and getattr(obj, "__module__", None) == mod:
                docs.append(inspect.getdoc(obj))
                if inspect.isclass(obj):
                    docs.extend(inspect.getdoc(m) for k, m in sorted(vars(obj).items())
                                if not k.startswith("_") and callable(m))
        for doc in docs:
            if doc and len(doc) > 200:
                parts.append(doc.strip())
                size += len(doc.encode()) + 2
    text = "\n\n".join(parts).encode("utf-8")[:TARGET]
    out.write_bytes(text.decode("utf-8", "ignore").encode("utf-8"))


if __name__ == "__main__":
    main()
