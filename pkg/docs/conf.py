# -*- coding: utf-8 -*-
#
# daodet documentation build configuration file.

import os
import sys

sys.path.insert(0, os.path.abspath(".."))

import daodet

# -- General configuration -----------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.viewcode",
    "sphinx.ext.todo",
    "sphinx.ext.doctest",
    "sphinx.ext.autosummary",
    "sphinx.ext.mathjax",
    "sphinx.ext.intersphinx",
]

todo_include_todos = True

templates_path = ["_templates"]
source_suffix = ".rst"
master_doc = "index"

project = u"daodet"
copyright = u"2026, daodet developers"

version = daodet.__version__
release = daodet.__version__

exclude_patterns = ["_build"]
pygments_style = "sphinx"

intersphinx_mapping = {
    "python": ("https://docs.python.org/3", None),
    "numpy": ("https://numpy.org/doc/stable", None),
    "torch": ("https://pytorch.org/docs/stable", None),
}

# -- Options for AUTODOC -------------------------------------------------------

autodoc_member_order = "bysource"


def skip(app, what, name, obj, skip, options):
    if name in ["__init__", "__call__"]:
        return False
    return skip


def setup(app):
    app.connect("autodoc-skip-member", skip)


# -- Options for HTML output ---------------------------------------------------

import sphinx_rtd_theme

html_theme = "sphinx_rtd_theme"
html_theme_path = [sphinx_rtd_theme.get_html_theme_path(), "./"]
htmlhelp_basename = "daodetdoc"

# -- Options for LaTeX and manual page output ----------------------------------

latex_documents = [("index", "daodet.tex", u"daodet documentation", u"daodet developers", "manual")]

man_pages = [("index", "daodet", u"daodet documentation", [u"daodet developers"], 1)]
