"""Packet-size fingerprinting of IoT devices behind NAT and VPN gateways.

The offline side learns packet-size embeddings, a neighbouring-probability
matrix, periodic key packets and a per-device decision tree. The tree and
the probability table are compiled into integer match-action rules that a
software switch pipeline executes per packet.
"""

from .compiler import CompiledTableSet, compile_model, read_rules, write_rules
from .dataplane import Detection, run_trace
from .harness import MixConfig, MixMode, evaluate, mix_traces
from .model import DeviceFingerprintModel, ModelParams, train_device_model
from .trace import PacketRecord, Trace, parse_csv, write_csv

__version__ = "0.1.0"

__all__ = [
    "CompiledTableSet", "Detection", "DeviceFingerprintModel", "MixConfig", "MixMode",
    "ModelParams", "PacketRecord", "Trace", "compile_model", "evaluate", "mix_traces",
    "parse_csv", "read_rules", "run_trace", "train_device_model", "write_csv", "write_rules",
]
