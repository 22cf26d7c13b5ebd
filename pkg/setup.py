#!/usr/bin/env python3
"""
Setup script for pollinate - plant skeletons, grasp planning and stem vibration
"""

from pathlib import Path

from setuptools import find_packages, setup

# Read the README file
this_directory = Path(__file__).parent
readme_file = this_directory / "README.md"
if readme_file.exists():
    long_description = readme_file.read_text(encoding="utf-8")
else:
    long_description = "Plant skeletonization, main-stem grasp planning and rod dynamics"

# Read requirements
requirements = []
requirements_file = this_directory / "requirements.txt"
if requirements_file.exists():
    requirements = [
        req.strip()
        for req in requirements_file.read_text().strip().split("\n")
        if req.strip() and not req.startswith("#")
    ]

# Package metadata
setup(
    name="pollinate",
    version="1.0.0",
    author="pollinate developers",
    description="Plant skeletonization, main-stem grasp planning and stem vibration simulation",
    long_description=long_description,
    long_description_content_type="text/markdown",
    package_dir={"": "src"},
    packages=find_packages(where="src"),
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Physics",
        "Topic :: Scientific/Engineering :: Image Recognition",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Operating System :: OS Independent",
        "Environment :: Console",
    ],
    python_requires=">=3.11",
    install_requires=requirements,
    extras_require={
        "dev": [
            "pytest>=7.4.0",
            "pytest-cov>=4.1.0",
            "pytest-xdist>=3.3.1",
            "ruff>=0.1.0",
        ],
        "test": [
            "pytest>=7.4.0",
            "pytest-cov>=4.1.0",
            "pytest-xdist>=3.3.1",
        ],
    },
    entry_points={
        "console_scripts": [
            "pollinate=pollinate.cli:main",
        ],
    },
    include_package_data=True,
    package_data={
        "pollinate": [
            "i18n/translations/*.json",
        ],
    },
    zip_safe=False,
    keywords=[
        "plant",
        "skeletonization",
        "point cloud",
        "grasp planning",
        "discrete elastic rods",
        "pollination",
        "vibration",
    ],
)
