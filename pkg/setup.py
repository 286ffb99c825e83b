import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

install_requires = [
    "matplotlib",
    "numpy>=1.20.0",
    "pandas>=1.0.0",
    "ruamel.yaml>=0.15.0",
    "scipy>=1.6.0",
    "shapely>=1.8.0",
    "tqdm"
]

tests_require = [
    'hypothesis',
    'pytest'
]

all_require = tests_require

setuptools.setup(
    name="layoutfusion",
    use_scm_version={'fallback_version': '0.1.0'},
    setup_requires=['setuptools_scm'],
    description="Calibration-free 2D LiDAR and camera alignment and indoor floor plan reconstruction",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=['tests']),
    scripts=["bin/layoutfusion", "bin/layoutfusion-benchmark"],
    install_requires=install_requires,
    tests_require=tests_require,
    extras_require={'test': tests_require, 'all': all_require},
    classifiers=(
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ),
    python_requires=">=3.8",
)
