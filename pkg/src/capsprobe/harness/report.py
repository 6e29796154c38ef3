"""Line-oriented metric records: ``metric=<name> model=<id> split=<id> value=<f64> denom=<u64>``."""

from dataclasses import dataclass, field


@dataclass
class Report:
    header: list = field(default_factory=list)
    records: list = field(default_factory=list)

    def add(self, metric, model, split, value, denom):
        self.records.append((str(metric), str(model), str(split), float(value), int(denom)))

    def note(self, line):
        self.header.append(line)

    def get(self, metric, model, split):
        for m, mo, s, v, d in self.records:
            if (m, mo, s) == (metric, model, split):
                return v, d
        raise KeyError((metric, model, split))

    def select(self, metric=None, model=None):
        return [r for r in self.records if (metric is None or r[0] == metric) and (model is None or r[1] == model)]

    def to_text(self):
        lines = [f"# {h}" for h in self.header]
        lines += [f"metric={m} model={mo} split={s} value={v!r} denom={d}" for m, mo, s, v, d in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())


def parse_report(text):
    rep = Report()
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            rep.note(line[1:].strip())
            continue
        kv = dict(tok.split("=", 1) for tok in line.split())
        rep.add(kv["metric"], kv["model"], kv["split"], float(kv["value"]), int(kv["denom"]))
    return rep
