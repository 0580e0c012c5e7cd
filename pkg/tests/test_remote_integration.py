"""The remote guidance path against a live echo service, checked for
bit-identity with the in-process echo provider."""

import re
import shutil
import subprocess
import time
from pathlib import Path

import pytest

from gsavatar.dataset import load_dataset
from gsavatar.guidance import EchoProvider, ProviderUnavailable, RemoteProvider
from gsavatar.synthetic import SynthConfig, generate_synthetic
from gsavatar.trainer import (
    METRICS_LOG,
    STAGE2_CHECKPOINT,
    TrainConfig,
    load_avatar,
    train_stage1,
    train_stage2,
)

SERVICE_MAIN = (Path(__file__).resolve().parents[1]
                / "diffusion-service" / "dist" / "main.js")

pytestmark = pytest.mark.skipif(
    shutil.which("node") is None or not SERVICE_MAIN.exists(),
    reason="needs node and a built diffusion-service (npm run build there)")


@pytest.fixture(scope="module")
def echo_service():
    proc = subprocess.Popen(
        ["node", str(SERVICE_MAIN), "--port", "0"],
        stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True)
    try:
        line = proc.stdout.readline()
        match = re.search(r":(\d+)$", line.strip())
        assert match, f"unexpected startup line: {line!r}"
        url = f"http://127.0.0.1:{match.group(1)}"
        provider = RemoteProvider(url, timeout=5.0)
        deadline = time.monotonic() + 10.0
        while True:
            try:
                if provider.health().get("status") == "ok":
                    break
            except ProviderUnavailable:
                pass
            assert time.monotonic() < deadline, "service never became healthy"
            time.sleep(0.1)
        yield url
    finally:
        proc.terminate()
        proc.wait(timeout=10)


@pytest.fixture(scope="module")
def warm_start(tmp_path_factory):
    root = tmp_path_factory.mktemp("remote")
    data = root / "data"
    generate_synthetic(
        SynthConfig(frame_count=2, resolution=48, gaussian_count=1500, seed=5),
        data)
    dataset = load_dataset(data)
    config = TrainConfig(resolution=48, map_resolution=16, dtype="f64",
                         seed=5, epochs_stage1=2, epochs_stage2=2,
                         iterations_per_epoch=4, azimuth_samples=12)
    train_stage1(dataset, config, root / "warm")
    return dataset, root


def test_health_reports_echo_model(echo_service):
    report = RemoteProvider(echo_service).health()
    assert report == {"status": "ok", "model": "echo"}


def test_remote_echo_trajectory_matches_in_process(echo_service, warm_start):
    dataset, root = warm_start
    outputs = {}
    for name, provider in (("remote", RemoteProvider(echo_service)),
                           ("local", EchoProvider())):
        state, config = load_avatar(root / "warm" / "stage1.avck",
                                    dataset.template)
        out = root / name
        train_stage2(dataset, state, config, provider, out)
        outputs[name] = out
    remote, local = outputs["remote"], outputs["local"]
    assert ((remote / STAGE2_CHECKPOINT).read_bytes()
            == (local / STAGE2_CHECKPOINT).read_bytes())
    assert ((remote / METRICS_LOG).read_text()
            == (local / METRICS_LOG).read_text())
