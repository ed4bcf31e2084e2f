#
# ddreg documentation build configuration file
#
# Only the options that differ from the Sphinx defaults are set here.

import os
import sys

sys.path.insert(0, os.path.abspath("../.."))

# -- General configuration ------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.viewcode",
    "sphinx.ext.napoleon",
    "sphinx.ext.mathjax",
]

templates_path = ["_templates"]
source_suffix = ".rst"
master_doc = "index"

project = "ddreg"
copyright = "2026, ddreg developers"
author = "ddreg developers"

from ddreg import __version__ as VERSION  # noqa

version = VERSION
release = VERSION

language = "en"
exclude_patterns = []
pygments_style = "sphinx"
todo_include_todos = False

autodoc_typehints = "description"
autodoc_member_order = "bysource"

# -- Options for HTML output ----------------------------------------------

html_theme = "alabaster"
html_theme_options = {
    "logo_name": "ddreg",
    "fixed_sidebar": True,
}
html_static_path = ["_static"]
html_sidebars = {
    "**": [
        "about.html",
        "navigation.html",
        "relations.html",
        "searchbox.html",
    ],
}
htmlhelp_basename = "ddregdoc"

# -- Options for LaTeX and manual page output -----------------------------

latex_documents = [
    (master_doc, "ddreg.tex", "ddreg Documentation", author, "manual"),
]
man_pages = [(master_doc, "ddreg", "ddreg Documentation", [author], 1)]
