"""File layout of a run directory."""

from dataclasses import dataclass
from pathlib import Path

from app.utils.types import Split, TaskKind

BASE_SLUG = "Base"


@dataclass(frozen=True)
class RunPaths:
    """Locations of every artifact below ``root``.

    Evaluation artifacts of the base checkpoint live in ``probe/`` as
    ``<kind>_<name>``; those of a tuned checkpoint live in
    ``finetune/<slug>/<kind>/<name>``.
    """

    root: Path

    @classmethod
    def of(cls, out_dir: str | Path) -> "RunPaths":
        return cls(Path(out_dir))

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    def dataset(self, kind: TaskKind, split: Split) -> Path:
        return self.root / "data" / f"{kind.value}_{split.value}.tsv"

    def manifest(self, kind: TaskKind) -> Path:
        return self.root / "data" / f"{kind.value}_manifest.json"

    @property
    def base_dir(self) -> Path:
        return self.root / "base"

    @property
    def base_checkpoint(self) -> Path:
        return self.base_dir / "model.plab"

    @property
    def base_log(self) -> Path:
        return self.base_dir / "train_log.csv"

    @property
    def base_timing(self) -> Path:
        return self.base_dir / "timing.json"

    @property
    def probe_dir(self) -> Path:
        return self.root / "probe"

    @property
    def plan(self) -> Path:
        return self.root / "finetune" / "plan.json"

    def tuned_dir(self, slug: str, kind: TaskKind) -> Path:
        return self.root / "finetune" / slug / kind.value

    def eval_file(self, slug: str, kind: TaskKind, name: str) -> Path:
        """Evaluation artifact ``name`` (e.g. ``curve.csv``) of one checkpoint and task."""
        if slug == BASE_SLUG:
            return self.probe_dir / f"{kind.value}_{name}"
        return self.tuned_dir(slug, kind) / name

    @property
    def report_dir(self) -> Path:
        return self.root / "report"
