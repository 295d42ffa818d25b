from setuptools import setup, find_packages

setup(
    name='weightlens',
    version='0.1.0',
    description='Diagnostics for fine-tuned model weights: bf16 update sparsity, update masks, spectral drift '
                'and function-preserving attention edits',
    long_description=open('README.md').read(),
    long_description_content_type='text/markdown',
    packages=find_packages(exclude=['tests']),
    include_package_data=True,
    install_requires=[
        'tqdm',
        'numpy>=1.22',
        'scipy>=1.8',
        'PyYAML>=5.4',
    ],
    extras_require={
        'dev': [
            'pytest>=6.0',
            'safetensors>=0.3',
        ],
    },
    entry_points={
        'console_scripts': [
            'weightlens=weightlens.cli:main',
        ],
    },
    python_requires='>=3.8',
    classifiers=[
        'Programming Language :: Python :: 3',
        'License :: OSI Approved :: MIT License',
        'Operating System :: OS Independent',
    ],
)
