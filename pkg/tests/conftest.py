import numpy as np
import pytest

from iotfp.trace import Direction, PacketRecord, Proto, Trace, ip_to_int

LAN = ip_to_int("192.168.1.10")
SERVER = ip_to_int("52.80.1.1")


def rec(ts, size, direction=0, label=None, host=LAN, server=SERVER, sport=40000,
        dport=443, proto=Proto.TCP):
    """Packet between ``host`` and ``server``; ``direction`` 0 is outbound."""
    if direction == 0:
        return PacketRecord(int(ts), host, server, sport, dport, proto, size,
                            Direction.LAN_TO_WAN, label)
    return PacketRecord(int(ts), server, host, dport, sport, proto, size,
                        Direction.WAN_TO_LAN, label)


def dir_rec(ts, p, **kw):
    """Packet from a directional size."""
    return rec(ts, p - 1500 if p > 1500 else p, 1 if p > 1500 else 0, **kw)


def trace_of(records):
    return Trace.from_unsorted(records)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class Scenario:
    """Synthetic devices NAT-mixed with background, one trained model per device."""

    def __init__(self, mode="nat", duration_s=600, devices=None, seed=42, epochs=20):
        from iotfp.compiler import compile_model
        from iotfp.embedding import TrainingConfig
        from iotfp.harness import DEMO_DEVICES, MixConfig, mix_traces, synthetic_scenario
        from iotfp.model import ModelParams, train_device_model

        catalog = DEMO_DEVICES if devices is None else {d: DEMO_DEVICES[d] for d in devices}
        rng = np.random.default_rng(seed)
        self.devices, self.background = synthetic_scenario(rng, duration_s * 1_000_000, 100.0, catalog)
        self.cfg = MixConfig(mode=mode)
        self.mixed = mix_traces(list(self.devices.values()), self.background, self.cfg)
        params = ModelParams(embedding=TrainingConfig(epochs=epochs))
        bg_view = self.mixed.select(None)
        self.models, self.summaries, self.tables = {}, {}, []
        for dev in catalog:
            model, summary = train_device_model(dev, self.mixed.select(dev), bg_view, self.mixed,
                                                params, key_trace=self.devices[dev],
                                                size_map=self.cfg.rewrite_dir_size)
            self.models[dev], self.summaries[dev] = model, summary
            self.tables.append(compile_model(model))


@pytest.fixture(scope="session")
def small_scenario():
    return Scenario(duration_s=600, devices=["plug-a", "cam-b"], seed=5, epochs=5)


# -- acceptance criteria reporting --------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}
N_CRITERIA = 10


@pytest.fixture
def criterion():
    """Record the outcome of an acceptance criterion: ``criterion(n, passed, detail)``."""
    def record(n: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[n] = (bool(passed), detail)
        print(f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: FAIL  (not run or errored)")
