#!/usr/bin/env python
# -*- coding: utf-8 -*-
import os, sys
from setuptools import setup

assert sys.version_info[0] >= 3, "For python >= 3 only"

cwd = os.path.abspath(os.path.dirname(__file__))
readme = open(os.path.join(cwd, "README.rst")).read()

setup(
    name="daodet",
    version="0.3",
    description="Domain adaptive object detection - align and distill a two-stage detector from source to target domain",
    long_description=readme,
    packages=["daodet"],
    scripts=["scripts/daodet"],
    classifiers=[
        "Programming Language :: Python",
        "Development Status :: 3 - Alpha",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Topic :: Scientific/Engineering :: Image Recognition",
    ],
    python_requires=">=3.8",
    install_requires=[
        "numpy",
        "scipy",
        "scikit-learn",
        "torch",
        "torchvision",
        "Pillow",
        "PyYAML",
        "tqdm",
        "plyvel",
    ],
)
