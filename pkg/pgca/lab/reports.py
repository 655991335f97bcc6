"""Comma-separated report files. Every report kind has a fixed header; floats
are written with ``repr`` so reruns compare byte for byte."""

import csv
import os

HEADERS = {
    "train_log": ("step", "lr", "loss", "eval_cer", "gates"),
    "cer_report": ("utterance", "substitutions", "deletions", "insertions", "ref_chars", "cer"),
    "gate_report": ("layer", "lang", "gate"),
    "heatmap": ("query_token",),
    "curve": ("k", "languages", "cer"),
    "selection": ("metric", "k", "languages", "cer"),
    "table2": ("id", "languages", "cer", "rel_reduction"),
    "table3": ("id", "fusion_mode", "cer"),
    "proximity": ("lang", "proximity_target", "proximity_pivot"),
    "noise_sweep": ("noise_rate", "cer"),
    "decoding": ("run", "teacher_forcing_cer", "free_running_cer"),
}


def fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "+".join(str(v) for v in value)
    return str(value)


def write_csv(path, kind, rows, header=None):
    header = header or HEADERS[kind]
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"{kind} row has {len(row)} fields, header has {len(header)}")
            writer.writerow([fmt(v) for v in row])
    return path


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


class CsvLog:
    """Append-only CSV, flushed per row."""

    def __init__(self, path, kind):
        self.path = path
        self.header = HEADERS[kind]
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self._file = open(path, "w", newline="")
        self._writer = csv.writer(self._file, lineterminator="\n")
        self._writer.writerow(self.header)

    def append(self, row):
        self._writer.writerow([fmt(v) for v in row])
        self._file.flush()

    def close(self):
        self._file.close()


def format_gates(table):
    return ";".join(f"{block}:{lang}={value!r}" for (block, lang), value in table.items())
