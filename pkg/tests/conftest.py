import pytest
import torch

from trec.data import TaskSpec, generate_task
from trec.denoiser import DenoiserConfig, SourceMemory
from trec.schedule import ScalingPolicy, make_schedule
from trec.trainer import TrainConfig, Trainer, build_model

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class OracleDenoiser:
    """Stand-in model that always predicts the embedding of a fixed target."""

    training = False

    def __init__(self, table: torch.Tensor, target, lengths=None):
        self.table = table
        self.target = list(target)
        self.lengths = lengths or [len(self.target)]
        self.calls = []

    def eval(self):
        return self

    def train(self, mode=True):
        return self

    def encode(self, src, pad_mask=None):
        src = torch.as_tensor(src)
        return SourceMemory(torch.zeros(src.shape[0], src.shape[1], 1, dtype=self.table.dtype), src == 0)

    def top_lengths(self, memory, src_len, k):
        return self.lengths[:k]

    def denoise(self, z_t, self_cond, memory, t, pad_mask=None):
        self.calls.append((int(t), None if self_cond is None else self_cond.clone()))
        L = z_t.shape[1]
        ids = (self.target + [self.target[-1]] * L)[:L]
        return self.table[torch.tensor(ids)].expand(z_t.shape[0], -1, -1).clone()


@pytest.fixture
def oracle_factory():
    return OracleDenoiser


@pytest.fixture(scope="session")
def trained_copy():
    """A small denoiser trained briefly on the copy task, shared across test modules."""
    torch.manual_seed(0)
    spec = TaskSpec(kind="copy", vocab_size=16, max_len=10, n_train=3000, n_valid=200, seed=5)
    train, valid, vocab = generate_task(spec)
    schedule, policy = make_schedule(), ScalingPolicy()
    model = build_model(DenoiserConfig(vocab_size=len(vocab)), 0)
    cfg = TrainConfig(lr=1e-3, warmup_steps=200, batch_size=64, seed=0)
    Trainer(model, schedule, policy, cfg, train, valid).run(1500, log_every=0)
    model.eval()
    return model, schedule, policy, train, valid
