"""Generate the offset-cylinder meshes with the gmsh Python API.

Domain: unit disk centred at the origin minus the disk of radius 0.5
centred at (0.5, 0). Physical groups: 1 = outer circle, 2 = inner circle,
3 = fluid surface.

Usage: python3 offset_cylinder.py LC OUTPUT.msh [2.2|4.1]
"""
import sys

import gmsh

lc = float(sys.argv[1])
out = sys.argv[2]
version = float(sys.argv[3]) if len(sys.argv) > 3 else 4.1

gmsh.initialize()
gmsh.option.setNumber("General.Terminal", 0)
gmsh.model.add("offset_cylinder")
occ = gmsh.model.occ
outer = occ.addDisk(0.0, 0.0, 0.0, 1.0, 1.0)
inner = occ.addDisk(0.5, 0.0, 0.0, 0.5, 0.5)
fluid, _ = occ.cut([(2, outer)], [(2, inner)])
occ.synchronize()

outer_curves, inner_curves = [], []
for dim, tag in gmsh.model.getBoundary(fluid, oriented=False):
    xmin, ymin, _, xmax, ymax, _ = gmsh.model.getBoundingBox(dim, tag)
    if xmin < -0.5:
        outer_curves.append(tag)
    else:
        inner_curves.append(tag)
gmsh.model.addPhysicalGroup(1, outer_curves, 1, "outer")
gmsh.model.addPhysicalGroup(1, inner_curves, 2, "inner")
gmsh.model.addPhysicalGroup(2, [t for _, t in fluid], 3, "fluid")

gmsh.option.setNumber("Mesh.MeshSizeMin", lc)
gmsh.option.setNumber("Mesh.MeshSizeMax", lc)
gmsh.option.setNumber("Mesh.Algorithm", 6)
gmsh.model.mesh.generate(2)
gmsh.option.setNumber("Mesh.MshFileVersion", version)
gmsh.option.setNumber("Mesh.Binary", 0)
gmsh.write(out)
gmsh.finalize()
