import hashlib
import json
import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parents[1]
ARTIFACTS = ROOT / "acceptance_out"
_SOURCES = ("diffusion.py", "model.py", "trainer.py", "tasks.py", "recipes.py", "vocab.py")

torch.set_num_threads(1)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion")
    config._criteria = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    n, title = mark.args
    ok = call.excinfo is None
    details = dict(item.user_properties).get("details", "")
    item.config._criteria[n] = (title, ok, details)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    crit = config._criteria
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(crit):
        title, ok, details = crit[n]
        line = f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}"
        terminalreporter.write_line(line + (f"  ({details})" if details else ""))


def _recipe_key() -> str:
    h = hashlib.sha256(torch.__version__.encode())
    src = ROOT / "src" / "dvlm"
    for name in _SOURCES:
        h.update((src / name).read_bytes())
    return h.hexdigest()[:16]


def _cached_model(request, name, build):
    """Training is deterministic, so a checkpoint is reused only when the
    training sources and torch version are unchanged."""
    from dvlm.checkpoint import load_checkpoint, save_checkpoint

    cache_dir = Path(request.config.cache.mkdir("dvlm-models"))
    key = _recipe_key()
    ckpt, meta = cache_dir / f"{name}-{key}.ckpt", cache_dir / f"{name}-{key}.json"
    if ckpt.exists() and meta.exists():
        model, vocab = load_checkpoint(ckpt)
        info = json.loads(meta.read_text())
        info["cached"] = True
        return model, vocab, info
    model, vocab, info = build()
    save_checkpoint(ckpt, model, vocab)
    meta.write_text(json.dumps(info))
    info["cached"] = False
    return model, vocab, info


@pytest.fixture(scope="session")
def trained(request):
    """Reference stage-1 + stage-2 model: (model, vocab, info)."""
    from dvlm.recipes import train_reference

    def build():
        r = train_reference(seed=0)
        return r.model, r.vocab, {"seconds": r.seconds, "final_loss": r.final_loss}

    return _cached_model(request, "reference", build)


@pytest.fixture(scope="session")
def fim_trained(request, trained):
    from dvlm.recipes import RecipeResult, train_fim
    from dvlm.checkpoint import load_checkpoint, save_checkpoint

    def build():
        base, vocab, _ = trained
        # copy so the reference model stays untouched
        tmp = Path(request.config.cache.mkdir("dvlm-models")) / "fim-base.tmp"
        save_checkpoint(tmp, base, vocab)
        model, vocab = load_checkpoint(tmp)
        r = train_fim(RecipeResult(model, vocab), seed=0)
        return r.model, r.vocab, {"seconds": r.seconds, "final_loss": r.final_loss}

    return _cached_model(request, "fim", build)


@pytest.fixture(scope="session")
def artifacts():
    ARTIFACTS.mkdir(exist_ok=True)
    return ARTIFACTS
