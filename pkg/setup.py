#!/usr/bin/env python
import subprocess
import sys

def setup():
    """Set up the eqdiff environment"""
    # Upgrade pip first
    subprocess.check_call([sys.executable, "-m", "pip", "install", "--upgrade", "pip"])

    # Install numerics, image export and test requirements
    subprocess.check_call([sys.executable, "-m", "pip", "install", "-r", "requirements.txt"])

    print("Setup complete! Try 'python run.py --help' or run the tests with 'pytest'")

def build():
    """Package metadata for pip / setuptools build commands"""
    from setuptools import setup as _setuptools_setup

    from core import __version__

    _setuptools_setup(
        name="eqdiff",
        version=__version__,
        packages=["core", "utils"],
        py_modules=["run"],
        package_data={"core": ["data/*.tsv"]},
        python_requires=">=3.9",
        install_requires=["numpy>=1.24.0", "scipy>=1.10.0", "Pillow>=11.0.0"],
    )

if __name__ == "__main__":
    if len(sys.argv) > 1:
        # Invoked by pip / setuptools (egg_info, bdist_wheel, editable_wheel, ...)
        build()
    else:
        setup()
