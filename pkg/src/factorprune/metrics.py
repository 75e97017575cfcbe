"""Line-delimited metrics: one JSON object per line, keys sorted.

Records must be flat (key -> number or string); anything else is an
error at emit time so a run never silently loses data.
"""

from __future__ import annotations

import json


class MetricsError(ValueError):
    pass


class MetricsWriter:
    def __init__(self, path):
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")
        self.count = 0

    def emit(self, record: dict):
        clean = {}
        for key, value in record.items():
            if not isinstance(key, str):
                raise MetricsError(f"metric keys must be strings, got {key!r}")
            if isinstance(value, bool) or not isinstance(value, (int, float, str)):
                raise MetricsError(f"unserializable value for {key!r}: {value!r}")
            if isinstance(value, float) and (value != value or value in (float("inf"), float("-inf"))):
                value = str(value)
            clean[key] = value
        self._fh.write(json.dumps(clean, sort_keys=True) + "\n")
        self._fh.flush()
        self.count += 1

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_metrics(path):
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
