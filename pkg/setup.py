from setuptools import (
    find_packages,
    setup
)

INSTALL_REQUIRES = (
    'matplotlib',
    'numpy',
    'pandas',
    'Pillow',
    'PyYAML',
    'scipy',
    'tqdm'
)

setup(
    name='segadapt',
    version='0.1.0',
    python_requires='>=3.8',
    description='Pixel-level adversarial and constraint-based domain adaptation for fully convolutional segmentation',
    author='Robert Lucey',
    url='https://github.com/RobertLucey/segadapt',
    packages=find_packages('src'),
    package_dir={'': 'src'},
    install_requires=INSTALL_REQUIRES,
    entry_points={
        'console_scripts': [
            'segadapt = segadapt.bin.segadapt:main',
        ]
    }
)
