# p2pfl_sim documentation build configuration file.
#
# This file is execfile()d with the current directory set to its
# containing dir.

import sys
import os

# Documentation is built against the source tree
sys.path.insert(0, os.path.abspath(".."))

from p2pfl_sim import __version__ as release

version = release

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.imgmath",
    "numpydoc",
]

templates_path = ["_templates"]
source_suffix = ".rst"
master_doc = "index"

project = "p2pfl_sim"
copyright = "2026, p2pfl_sim developers"

exclude_patterns = ["_build"]
pygments_style = "sphinx"

html_theme = "sphinx_rtd_theme"
html_theme_options = {
    "navigation_depth": 4,
    "collapse_navigation": False,
}
html_sidebars = {
    "**": [
        "globaltoc.html",
        "localtoc.html",
        "relations.html",
        "sourcelink.html",
        "searchbox.html",
    ]
}
html_domain_indices = True
htmlhelp_basename = "p2pfl_simdoc"

latex_documents = [
    ("index", "p2pfl_sim.tex", "p2pfl\\_sim Documentation", "p2pfl_sim developers", "manual"),
]
man_pages = [("index", "p2pfl_sim", "p2pfl_sim Documentation", ["p2pfl_sim developers"], 1)]

autodoc_member_order = "bysource"
numpydoc_show_class_members = False
