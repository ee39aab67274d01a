import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(name='django-clpm',
      version='1.0',
      description='Continuous latent position model for timestamped interaction networks, as a Django app',
      long_description=long_description,
      long_description_content_type="text/markdown",
      license='MIT',
      packages=setuptools.find_packages(exclude=["examples", "examples.*"]),
      include_package_data=True,
      zip_safe=False,
      classifiers=[
        "Development Status :: 4 - Beta",
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Framework :: Django",
        "Framework :: Django :: 4.0",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Information Analysis",
      ],
      python_requires='>=3.9',
      install_requires=[
          'django',
          'python-ubercode-utils',
          'numpy',
          'scipy',
          'scikit-learn',
          'pandas',
      ],
      extras_require={
          'test': ['hypothesis'],
      },
      entry_points={
          'console_scripts': ['clpm=clpm.__main__:main'],
      },
)
