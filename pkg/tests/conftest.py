""" Pytest configuration file, define fixtures
"""
import os
import shutil
import tempfile

import pytest

from daodet.runcache import LeveldbRunCache, MemoryRunCache

from utils import tiny_pair


## Run cache fixture
def parametrize_cache(**kwargs):
    return pytest.mark.parametrize("cache", get_caches(**kwargs), indirect=True, ids=cache_name)


def get_caches(volatile=True, persistant=True, create_dir=True):
    """ Generates a list of run cache fixture configuration

    :attr volatile: include RAM backend
    :attr persistant: include Disk backend
    :attr create_dir: whether to create the directory (for disk backend), if None both cases are given
    """
    caches = []
    if volatile:
        caches.append({"name": "ram"})
    if persistant:
        creates = (True, False) if create_dir is None else (create_dir,)
        for create in creates:
            caches.append({"name": "leveldb", "create": create})
    return caches


def cache_name(param):
    name = param["name"]
    if "create" in param and not param["create"]:
        name += "_nocreate"
    return name


@pytest.fixture
def cache(request):
    backend = request.param["name"]
    if backend == "ram":
        cache = MemoryRunCache()
    elif backend == "leveldb":
        fs_path = tempfile.mkdtemp(prefix="tmp_daodet_cache_")
        root = fs_path
        if not request.param.get("create", True):
            fs_path = os.path.join(fs_path, "new_dir")
        cache = LeveldbRunCache(fs_path)

        def fin():
            """teardown leveldb"""
            cache.close()
            shutil.rmtree(root)

        request.addfinalizer(fin)
    else:
        raise ValueError("Invalid `cache` fixture param, got: %s" % backend)
    return cache


## Working directory fixture


@pytest.fixture
def workdir(request):
    path = tempfile.mkdtemp(prefix="tmp_daodet_")

    def fin():
        shutil.rmtree(path, ignore_errors=True)

    request.addfinalizer(fin)
    return path


## Data fixture


@pytest.fixture(scope="session")
def pair():
    """ Small synthetic benchmark shared by the tests (do not mutate). """
    return tiny_pair()
