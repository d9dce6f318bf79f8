#!/usr/bin/env python
from setuptools import setup, find_packages
import sys

packages = find_packages(exclude=['tests', 'tests.*'])
version_str = '0.3.0'

if sys.version_info.major < 3:
    print("tinymr can only run in Python 3.")
    sys.exit(1)


setup(
    name = 'tinymr',
    version = version_str,
    description = 'A tiny-task map-reduce platform for subsampling workloads',
    packages=packages,
    include_package_data=True,
    install_requires=[
        'click', 'numpy', 'scipy', 'pandas', 'msgpack'
    ],
    license = 'Apache License 2.0',
    entry_points = {
        'console_scripts': [
            'tinymr = tinymr.cli:cli',
        ]
    },
    extras_require={
        'test': ['pytest']
    },
)
