"""Replayable page corpus: three page classes and the manifest format.

Each page is a directory holding a plain-text index file plus same-host asset
bodies. The index doubles as the page manifest: a `#page <id>` line, one
`asset <path>` line per subresource, then deterministic padding up to the
exact index size. Asset bodies are a pure function of (seed, path, size), so
the same seed always regenerates a byte-identical corpus.
"""

from __future__ import annotations

import os
import random
from dataclasses import dataclass, field

__all__ = [
    "Asset",
    "PageManifest",
    "PAGE_CLASSES",
    "generate_corpus",
    "parse_manifest",
    "content_type_for",
    "ManifestError",
]


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Asset:
    path: str
    size_bytes: int
    content_type: str


@dataclass
class PageManifest:
    page_id: str
    index_path: str
    index_size: int = 0
    assets: list[Asset] = field(default_factory=list)


_CONTENT_TYPES = {
    ".txt": "text/plain",
    ".js": "application/javascript",
    ".css": "text/css",
    ".png": "image/png",
    ".svg": "image/svg+xml",
    ".html": "text/html; charset=utf-8",
}


def content_type_for(path: str) -> str:
    _, ext = os.path.splitext(path)
    return _CONTENT_TYPES.get(ext, "application/octet-stream")


def _page_specs() -> list[tuple[str, int, list[tuple[str, int]]]]:
    """(page_id, index_size, [(asset filename, size)]) for the three classes."""
    return [
        ("single_doc", 1200, []),
        (
            "doc_plus_assets",
            18252,
            [
                ("logo-large.png", 15857),
                ("logo-small.png", 2039),
                ("sprite.svg", 17229),
                ("page.js", 614),
            ],
        ),
        (
            "complex",
            18252,
            [(f"script{i}.js", 40960) for i in range(7)]
            + [(f"style{i}.css", 10240) for i in range(2)],
        ),
    ]


PAGE_CLASSES = tuple(spec[0] for spec in _page_specs())


def _asset_body(seed: int, path: str, size: int) -> bytes:
    return random.Random(f"{seed}:{path}").randbytes(size)


def _index_body(seed: int, page_id: str, asset_paths: list[str], size: int) -> bytes:
    lines = [f"#page {page_id}\n"] + [f"asset {p}\n" for p in asset_paths]
    head = "".join(lines).encode()
    pad_needed = size - len(head)
    if pad_needed < 2:
        raise ManifestError(f"index size {size} too small for {page_id} manifest header")
    rng = random.Random(f"{seed}:{page_id}:pad")
    filler = "".join(rng.choice("abcdefghijklmnopqrstuvwxyz0123456789") for _ in range(pad_needed - 2))
    return head + b"#" + filler.encode() + b"\n"


def generate_corpus(root: str, seed: int) -> list[PageManifest]:
    """Write the three pages under `root`; returns their manifests."""
    manifests: list[PageManifest] = []
    for page_id, index_size, asset_specs in _page_specs():
        page_dir = os.path.join(root, page_id)
        os.makedirs(page_dir, exist_ok=True)
        assets = []
        for fname, size in asset_specs:
            path = f"/{page_id}/{fname}"
            body = _asset_body(seed, path, size)
            with open(os.path.join(page_dir, fname), "wb") as fh:
                fh.write(body)
            assets.append(Asset(path, size, content_type_for(fname)))
        index_path = f"/{page_id}/index.txt"
        body = _index_body(seed, page_id, [a.path for a in assets], index_size)
        assert len(body) == index_size
        with open(os.path.join(page_dir, "index.txt"), "wb") as fh:
            fh.write(body)
        manifests.append(PageManifest(page_id, index_path, index_size, assets))
    return manifests


def parse_manifest(index_bytes: bytes) -> PageManifest:
    """Recover (page id, asset paths) from a fetched index document.

    Asset sizes and types are unknown at parse time (they come from fetching
    the bodies), so parsed entries carry size 0 and an empty content type.
    Everything after the asset block is padding and is ignored.
    """
    lines = index_bytes.decode("utf-8", errors="replace").split("\n")
    if not lines or not lines[0].startswith("#page "):
        raise ManifestError("index does not begin with a #page line")
    page_id = lines[0][len("#page ") :].strip()
    if not page_id:
        raise ManifestError("#page line carries no page id")
    assets: list[Asset] = []
    for line in lines[1:]:
        tokens = line.split()
        if not tokens or tokens[0] != "asset":
            break  # padding begins; the rest of the payload is ignored
        if len(tokens) < 2:
            raise ManifestError(f"asset line without a path: {line!r}")
        assets.append(Asset(tokens[1], 0, ""))
    return PageManifest(page_id, "", len(index_bytes), assets)
