from setuptools import setup

setup(
    name="freegibbs",
    version="1.0.0",
    py_modules=["errors", "matrices", "tracepoly", "potential", "reports", "sampler", "semigroup",
                "condexp", "entropy", "transport", "config", "verify", "freegibbs"],
    install_requires=["numpy>=1.22", "scipy>=1.8"],
    python_requires=">=3.8",
    entry_points={"console_scripts": ["freegibbs=freegibbs:main"]},
)
