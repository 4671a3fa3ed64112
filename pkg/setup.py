import sys

from setuptools import setup

install_requires = [
    "numpy >= 1.20",
    "scipy >= 1.7",
    "torch >= 1.13",
    "scikit-learn >= 1.1",
]

dev_requires = [
    "black",
]

test_requires = [
    "pytest >= 7.0",
]

extras = {
    "dev": dev_requires + test_requires,
    "test": test_requires,
}

if sys.version_info < (3, 8):
    extras["dev"].remove("black")

extras["all_extras"] = sum(extras.values(), [])

setup(
    name="tpnica",
    version="0.1.0",
    description="t-process nonlinear ICA for spatial data",
    install_requires=install_requires,
    extras_require=extras,
    python_requires=">=3.8.0",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "License :: OSI Approved :: BSD License",
        "Programming Language :: Python :: 3",
        "Topic :: Scientific/Engineering :: Mathematics",
    ],
    keywords="nonlinear ica t-process gaussian-process variational-inference",
    license="BSD",
    packages=["tpnica"],
    entry_points={"console_scripts": ["tpnica = tpnica.cli:main"]},
    zip_safe=False,
)
