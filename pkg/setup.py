from pathlib import Path

from setuptools import find_packages, setup


def read_requirements():
    lines = Path(__file__).with_name('requirements.txt').read_text().splitlines()
    return [line.strip() for line in lines
            if line.strip() and not line.startswith('#') and not line.startswith('pytest')]


setup(
    name='anodet',
    version='0.1.0',
    description='Consistency-regularized Wasserstein BiGAN for one-class visual anomaly detection',
    packages=find_packages(include=['anodet', 'anodet.*']),
    python_requires='>=3.10',
    install_requires=read_requirements(),
    extras_require={'test': ['pytest']},
    entry_points={'console_scripts': ['anodet=anodet.cli:main']},
)
