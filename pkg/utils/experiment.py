import json
import logging
import os
from pathlib import Path
from typing import Optional

from core import __version__
from core.errors import DataError

logger = logging.getLogger("EqDiff")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def setup_logging(log_file: str = "eqdiff.log", verbose: bool = False) -> None:
    """File logging in the shared format; ``verbose`` echoes to the console too."""
    os.makedirs(os.path.dirname(log_file) or ".", exist_ok=True)
    logging.basicConfig(
        level=logging.INFO,
        format=LOG_FORMAT,
        filename=log_file,
        filemode="a",
        force=True,
    )
    if verbose:
        console = logging.StreamHandler()
        console.setFormatter(logging.Formatter(LOG_FORMAT))
        logging.getLogger().addHandler(console)


class ExperimentDir:
    """checkpoints/, samples/, reports/ and logs/ under one root, plus manifest.json."""

    SUBDIRS = ("checkpoints", "samples", "reports", "logs")

    def __init__(self, root):
        self.root = Path(root)
        for name in self.SUBDIRS:
            (self.root / name).mkdir(parents=True, exist_ok=True)

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def samples(self) -> Path:
        return self.root / "samples"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    @property
    def log_file(self) -> str:
        return str(self.logs / "run.log")

    @property
    def loss_log(self) -> str:
        return str(self.logs / "loss.csv")

    @property
    def config_file(self) -> str:
        return str(self.root / "config.ini")

    def write_manifest(self, config, command: str, arguments: Optional[dict] = None) -> Path:
        """Record what is needed to re-run this experiment identically."""
        config.save(self.config_file)
        manifest = {
            "code_version": __version__,
            "command": command,
            "arguments": arguments or {},
            "config_hash": config.hash(),
            "seed": {"training": config.get("training", "seed"), "sampler": config.get("sampler", "seed")},
            "config": config.resolved(),
        }
        path = self.root / "manifest.json"
        with open(path, "w") as f:
            json.dump(manifest, f, indent=2, default=list)
        logger.info(f"Experiment manifest written to {path}")
        return path


def range_image_stems(directory) -> list[Path]:
    """Stems of all range-image artifacts in ``directory``, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"artifact directory {directory} does not exist")
    stems = []
    for sidecar in sorted(directory.glob("*.json")):
        try:
            with open(sidecar, "r") as f:
                meta = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read sidecar {sidecar}: {e}") from e
        if isinstance(meta, dict) and meta.get("kind") == "range_image":
            stems.append(sidecar.with_suffix(""))
    return stems
