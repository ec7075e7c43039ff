from segadapt.exceptions import InfeasibleConstraintsError, ParseError

LOWER = 'lower'
UPPER = 'upper'

FEASIBILITY_TOLERANCE = 1e-12


class ConstraintSet():

    def __init__(self, *args, **kwargs):
        self._data = kwargs.get('data', [])
        self.num_classes = kwargs.get('num_classes')

    def __getitem__(self, i):
        return self._data[i]

    def __iter__(self):
        return (i for i in self._data)

    def __len__(self):
        return len(self._data)

    def append(self, data):
        self._data.append(data)

    def extend(self, data):
        self._data.extend(data)

    @property
    def is_empty(self):
        return len(self) == 0

    def filter(self, **kwargs):
        return ConstraintSet(
            data=[
                d for d in self if all(
                    getattr(d, attr) == kwargs[attr] for attr in kwargs.keys()
                )
            ],
            num_classes=self.num_classes
        )

    def lower_bounds(self):
        return {c.class_id: c.bound for c in self if c.kind == LOWER}

    def upper_bounds(self):
        return {c.class_id: c.bound for c in self if c.kind == UPPER}

    def check_feasible(self):
        violated = []
        lowers = self.lower_bounds()
        uppers = self.upper_bounds()
        for class_id, lower in lowers.items():
            if class_id in uppers and lower > uppers[class_id] + FEASIBILITY_TOLERANCE:
                violated.append(f'class {class_id}: lower {lower} > upper {uppers[class_id]}')
        if sum(lowers.values()) > 1 + FEASIBILITY_TOLERANCE:
            violated.append(f'lower bounds sum to {sum(lowers.values())} > 1')
        if self.num_classes is not None and len(uppers) == self.num_classes:
            if sum(uppers.values()) < 1 - FEASIBILITY_TOLERANCE:
                violated.append(f'upper bounds sum to {sum(uppers.values())} < 1')
        if violated:
            raise InfeasibleConstraintsError(
                'Infeasible constraint set: ' + '; '.join(violated),
                violated=violated
            )
        return self

    def serialize(self):
        return [
            d.serialize() for d in self
        ]

    @staticmethod
    def parse(data, num_classes=None):
        if isinstance(data, ConstraintSet):
            return data
        if isinstance(data, list):
            return ConstraintSet(
                data=[Constraint.parse(d) for d in data],
                num_classes=num_classes
            )
        raise NotImplementedError()


class Constraint():
    '''
    Coverage bound on one class: fraction of (non-ignored) pixels.
    Soft bounds are slack-penalised, hard bounds are exact.
    '''

    __slots__ = [
        'class_id',
        'kind',
        'bound',
        'hard',
    ]

    def __init__(self, **kwargs):
        self.class_id = int(kwargs['class_id'])
        self.kind = kwargs['kind']
        self.bound = float(kwargs['bound'])
        self.hard = bool(kwargs.get('hard', True))
        if self.kind not in (LOWER, UPPER):
            raise ParseError(f'Unknown constraint kind {self.kind!r}', entry=self.class_id)
        if not 0 <= self.bound <= 1:
            raise ParseError(f'Constraint bound {self.bound} outside [0, 1]', entry=self.class_id)

    @property
    def sign(self):
        return 1.0 if self.kind == LOWER else -1.0

    def __repr__(self):
        return f'Constraint({self.class_id}, {self.kind}, {self.bound:.4f}, hard={self.hard})'

    @staticmethod
    def parse(data):
        if isinstance(data, Constraint):
            return data
        if isinstance(data, dict):
            return Constraint(**data)
        raise NotImplementedError()

    def serialize(self):
        return {
            'class_id': self.class_id,
            'kind': self.kind,
            'bound': self.bound,
            'hard': self.hard,
        }
