from setuptools import setup, find_packages

# Package meta-data.
NAME = "avclues"
DESCRIPTION = (
    "Audio-visual question answering on pre-extracted features: association "
    "blocks, question-centred clue aggregation and contrastive distillation"
)
URL = "https://github.com/u9n/avclues"
REQUIRES_PYTHON = ">=3.8"
VERSION = "0.1.0"

# What packages are required for this module to be executed?
REQUIRED = [
    "torch>=1.13",
    "numpy>=1.21",
    "attrs>=21.3.0",
    "PyYAML>=6.0",
    "matplotlib>=3.5",
    "redis>=4.5",
    "hiredis>=2.0",
]

# What packages are optional?
EXTRAS = {}

with open("README.md") as readme_file:
    readme = readme_file.read()

with open("HISTORY.md") as history_file:
    history = history_file.read()

setup(
    name=NAME,
    version=VERSION,
    python_requires=REQUIRES_PYTHON,
    description=DESCRIPTION,
    long_description=readme + "\n\n" + history,
    long_description_content_type="text/markdown",
    url=URL,
    packages=find_packages(exclude=("tests",)),
    entry_points={"console_scripts": ["avclues=avclues.cli:main"]},
    install_requires=REQUIRED,
    extras_require=EXTRAS,
    include_package_data=True,
    license="BSD-3",
    zip_safe=False,
    keywords=["audio-visual", "question answering", "multimodal", "pytorch"],
    classifiers=[
        "Development Status :: 3 - Alpha",
        "License :: OSI Approved :: BSD License",
        "Natural Language :: English",
        "Programming Language :: Python",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3 :: Only",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
)
