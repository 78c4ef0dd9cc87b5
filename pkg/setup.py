#!/usr/bin/env python3
"""
Skeletal Radiance - package setup
Installs the skeletal_radiance package and the skeletal-radiance command
"""

from pathlib import Path

from setuptools import find_packages, setup

README = Path(__file__).parent / "README.md"

setup(
    name="skeletal-radiance",
    version="1.0",
    description="Generalizable skeletal radiance fields for articulated performers, trained on synthetic captures",
    long_description=README.read_text(encoding="utf-8") if README.exists() else "",
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=("tests", "tests.*")),
    python_requires=">=3.8",
    install_requires=[
        "numpy>=1.20",
        "scipy>=1.7",
        "scikit-image>=0.19",
        "Pillow>=8.0",
        "PyYAML>=5.4",
        "tqdm>=4.60",
    ],
    extras_require={
        "test": ["pytest>=7.0", "hypothesis>=6.0"],
    },
    entry_points={
        "console_scripts": [
            "skeletal-radiance=skeletal_radiance.cli:main",
        ],
    },
)
