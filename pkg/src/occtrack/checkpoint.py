"""Model checkpoints: one ``.npz`` archive of named parameter arrays plus a
plain-text ``key: value`` header.

Array names are ``traj/<parameter>`` and ``assess/<parameter>``; the header
sits in the ``header`` entry. Header keys:

``format``, ``traj_config`` and ``assess_config`` (JSON, absent when the net
is), ``pyramid`` (JSON), ``temperature``, ``tau``, ``strict_motion``, ``seed``,
``traj_epochs``, ``assess_epochs``. Unknown keys are kept and written back.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .assess import AssessConfig, AssessNet
from .bgmotion import PyramidConfig
from .pipeline import Models
from .trajnet import TrajectoryNet, TrajectoryNetConfig

FORMAT = "occtrack-checkpoint 1"
# fixed member timestamps keep archives byte-identical across runs
_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def format_header(fields: dict) -> str:
    lines = []
    for k, v in fields.items():
        if "\n" in str(v) or ":" in k:
            raise ValueError(f"header field {k!r} cannot be written on one line")
        lines.append(f"{k}: {v}")
    return "\n".join(lines) + "\n"


def parse_header(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ValueError(f"header line {lineno}: expected 'key: value', got {line!r}")
        out[key.strip()] = value.strip()
    return out


def _write_npz(path: Path, arrays: dict[str, np.ndarray]) -> None:
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.save(buf, arr, allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_TIME)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def _state_arrays(prefix: str, net: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in net.state_dict().items()}


def save_checkpoint(path: str | Path, models: Models, **extra) -> Path:
    path = Path(path)
    header = {"format": FORMAT}
    arrays = {}
    if models.traj is not None:
        header["traj_config"] = json.dumps(models.traj.cfg.to_dict())
        arrays.update(_state_arrays("traj", models.traj))
    if models.assess is not None:
        header["assess_config"] = json.dumps(models.assess.cfg.to_dict())
        arrays.update(_state_arrays("assess", models.assess))
    header["pyramid"] = json.dumps(asdict(models.pyramid))
    header["temperature"] = repr(float(models.temperature))
    header["tau"] = repr(float(models.tau))
    header["strict_motion"] = str(models.strict_motion).lower()
    header.update({k: v for k, v in extra.items() if v is not None})
    arrays["header"] = np.array(format_header(header))
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_npz(path, arrays)
    return path


def _load_net(net: torch.nn.Module, prefix: str, data, path: Path) -> torch.nn.Module:
    expected = net.state_dict()
    state = {}
    for k, ref in expected.items():
        name = f"{prefix}/{k}"
        if name not in data:
            raise ValueError(f"{path}: missing array {name}")
        arr = data[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise ValueError(f"{path}: array {name} has shape {arr.shape}, config expects {tuple(ref.shape)}")
        state[k] = torch.as_tensor(arr)
    extra = [n for n in data.files if n.startswith(prefix + "/") and n[len(prefix) + 1 :] not in expected]
    if extra:
        raise ValueError(f"{path}: unexpected arrays {extra[:3]}")
    dtype = next(iter(state.values())).dtype if state else torch.float32
    net.to(dtype)
    net.load_state_dict(state)
    net.eval()
    return net


def read_header(path: str | Path) -> dict[str, str]:
    with np.load(Path(path), allow_pickle=False) as data:
        if "header" not in data:
            raise ValueError(f"{path}: not a checkpoint (no header)")
        return parse_header(str(data["header"]))


def load_checkpoint(path: str | Path) -> tuple[Models, dict[str, str]]:
    """Models and the raw header; shapes are checked against the echoed configs."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    with np.load(path, allow_pickle=False) as data:
        if "header" not in data:
            raise ValueError(f"{path}: not a checkpoint (no header)")
        header = parse_header(str(data["header"]))
        if header.get("format") != FORMAT:
            raise ValueError(f"{path}: unsupported format {header.get('format')!r}")
        traj = assess = None
        if "traj_config" in header:
            traj = _load_net(TrajectoryNet(TrajectoryNetConfig.from_dict(json.loads(header["traj_config"]))), "traj", data, path)
        if "assess_config" in header:
            assess = _load_net(AssessNet(AssessConfig.from_dict(json.loads(header["assess_config"]))), "assess", data, path)
    pyr = json.loads(header.get("pyramid", "{}"))
    for k in ("scale_factors", "rotation_factors"):
        if k in pyr:
            pyr[k] = tuple(pyr[k])
    models = Models(
        traj,
        assess,
        temperature=float(header.get("temperature", 1.0)),
        tau=float(header.get("tau", 0.5)),
        pyramid=PyramidConfig(**pyr),
        strict_motion=header.get("strict_motion", "false") == "true",
    )
    return models, header


def update_header(path: str | Path, **fields) -> None:
    """Rewrite header fields in place, keeping every array."""
    path = Path(path)
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    header = parse_header(str(arrays["header"]))
    header.update({k: str(v) for k, v in fields.items()})
    arrays["header"] = np.array(format_header(header))
    _write_npz(path, arrays)
