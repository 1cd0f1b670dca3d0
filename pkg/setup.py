#!/usr/bin/env python
"""
Install the hybridroi modules and register the `hybridroi` command
"""
from pathlib import Path

from setuptools import setup

HERE = Path(__file__).parent


def read_requirements():
    """Runtime pins from requirements.txt, minus the test tooling"""
    test_only = ("pytest", "iniconfig", "pluggy", "Pygments", "colorama")
    lines = (HERE / "requirements.txt").read_text(encoding="utf-8").splitlines()
    return [line for line in lines if line and not line.startswith(test_only)]


setup(
    name="hybridroi",
    version="0.1.0",
    description="Hybrid CNN + bidirectional selective-scan classifier for mammography ROIs",
    long_description=(HERE / "README.md").read_text(encoding="utf-8"),
    long_description_content_type="text/markdown",
    python_requires=">=3.10",
    py_modules=[
        "backbone", "checkpoint", "cli", "data", "errors", "fusion", "logger",
        "metrics", "models", "ssm", "tensor", "trainer",
    ],
    install_requires=read_requirements(),
    extras_require={"test": ["pytest==8.4.2"]},
    entry_points={"console_scripts": ["hybridroi=cli:main"]},
)
