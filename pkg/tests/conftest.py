import time

import pytest
import torch

from ppp.harness import desk_config, evaluate, load_splits, train
from ppp.model import GatedResNet, ModelSpec


def small_spec(**kw):
    base = dict(widths=(8, 16), blocks_per_stage=1, input_size=8)
    base.update(kw)
    return ModelSpec(**base)


def randomize_bn(model, seed=0):
    """Give every batchnorm non-trivial statistics and affine terms."""
    gen = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, (torch.nn.BatchNorm1d, torch.nn.BatchNorm2d)):
            n = m.num_features
            m.running_mean.copy_(torch.randn(n, generator=gen) * 0.1)
            m.running_var.copy_(torch.rand(n, generator=gen) + 0.5)
            m.weight.data.copy_(torch.rand(n, generator=gen) + 0.5)
            m.bias.data.copy_(torch.randn(n, generator=gen) * 0.1)
    return model


@pytest.fixture
def small_model():
    torch.manual_seed(0)
    return randomize_bn(GatedResNet(small_spec())).eval()


@pytest.fixture
def desk_model():
    torch.manual_seed(0)
    return randomize_bn(GatedResNet(ModelSpec())).eval()


# ---------------------------------------------------------------------------
# desk-scale trained artifacts, shared by the acceptance suite


class Desk:
    """Vanilla backbone plus PPP and NoReg fine-tunes on the desk dataset."""

    def __init__(self, seed=0):
        self.configs = {m: desk_config(m, seed) for m in ("vanilla", "ppp", "noreg")}
        self.train_ds, self.test_ds = load_splits(self.configs["ppp"].data)
        self.cpu_seconds = {}
        self.ckpt = {}
        for mode in ("vanilla", "ppp", "noreg"):
            start = time.process_time()
            pre = self.ckpt.get("vanilla") if mode != "vanilla" else None
            self.ckpt[mode] = train(self.configs[mode], self.train_ds, pretrained=pre)
            self.cpu_seconds[mode] = time.process_time() - start
        self._reports = {}

    def report(self, mode, kind):
        key = (mode, kind)
        if key not in self._reports:
            self._reports[key] = evaluate(self.ckpt[mode], self.test_ds, kind)
        return self._reports[key]


@pytest.fixture(scope="session")
def desk():
    return Desk()


VERDICTS = []


@pytest.fixture(scope="session")
def verdict():
    """Record one acceptance line: verdict(n, name, passed, detail)."""
    def record(number, name, passed, detail):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        VERDICTS.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)
