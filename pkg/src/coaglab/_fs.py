"""Atomic file writes and content hashes."""

from __future__ import annotations

import hashlib
import os
import tempfile


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    folder = os.path.dirname(path) or "."
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode())


def git_blob_hash(data):
    """SHA-1 of ``b"blob <len>\\0" + data``, as used by git for file contents."""
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def file_blob_hash(path):
    with open(path, "rb") as fh:
        return git_blob_hash(fh.read())
