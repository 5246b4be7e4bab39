"""Annotation-cost model.

Given a labeling workload (image count, seconds per read, hourly wage),
translates a label-efficiency result ("matches the baseline with f of the
labels") into annotator hours and dollars saved.
"""

from shiftlab.cost import CostSpec, cost_savings

tasks = [
    CostSpec(name="screening-reads", image_count=17322, seconds_per_image=60,
             hourly_wage=171.60),
    CostSpec(name="panel-review", image_count=17904, seconds_per_image=600,
             hourly_wage=138.0, cost_per_image=23.0),
]

for spec in tasks:
    print(f"{spec.name}: {spec.image_count:,} images, "
          f"{spec.seconds_per_image:.0f}s each at ${spec.resolved_cost_per_image():.2f}/image")
    print(f"  full labeling: {spec.total_hours():,.0f} annotator-hours, "
          f"${spec.total_dollars():,.0f}")
    note = spec.consistency_note()
    if note:
        print(f"  note: {note}")
    for fraction in (0.332, 0.5):
        rep = cost_savings(spec, fraction)
        print(f"  matching at {fraction:.1%} of labels saves "
              f"{rep.samples_saved:,} annotations = {rep.hours_saved:,.0f} h = "
              f"${rep.dollars_saved:,.0f}")
    print()
