"""Run ledger tables

Revision ID: 5c1e7d2a90b4
Revises: 
Create Date: 2026-10-16 09:12:40.118204

"""
from typing import Sequence, Union

from alembic import op
import sqlalchemy as sa

import sqlmodel

# revision identifiers, used by Alembic.
revision: str = '5c1e7d2a90b4'
down_revision: Union[str, None] = None
branch_labels: Union[str, Sequence[str], None] = None
depends_on: Union[str, Sequence[str], None] = None


def upgrade() -> None:
    # ### commands auto generated by Alembic - please adjust! ###
    op.create_table('run',
    sa.Column('config_hash', sa.String(length=16), nullable=True),
    sa.Column('strategy', sa.String(length=32), nullable=True),
    sa.Column('lam', sa.Float(), nullable=False),
    sa.Column('seed', sa.Integer(), nullable=False),
    sa.Column('num_tasks', sa.Integer(), nullable=False),
    sa.Column('last_acc', sa.Float(), nullable=False),
    sa.Column('inc_acc', sa.Float(), nullable=False),
    sa.Column('out_dir', sqlmodel.sql.sqltypes.AutoString(), nullable=True),
    sa.Column('started_at', sa.DateTime(), nullable=False),
    sa.Column('finished_at', sa.DateTime(), nullable=False),
    sa.Column('uuid', sa.Uuid(), nullable=False),
    sa.PrimaryKeyConstraint('uuid')
    )
    op.create_index(op.f('ix_run_config_hash'), 'run', ['config_hash'], unique=False)
    op.create_index(op.f('ix_run_strategy'), 'run', ['strategy'], unique=False)
    op.create_table('taskresult',
    sa.Column('task', sa.Integer(), nullable=False),
    sa.Column('acc_seen', sa.Float(), nullable=False),
    sa.Column('merge_count', sa.Integer(), nullable=False),
    sa.Column('wall_time', sa.Float(), nullable=False),
    sa.Column('run_id', sa.Uuid(), nullable=False),
    sa.Column('uuid', sa.Uuid(), nullable=False),
    sa.ForeignKeyConstraint(['run_id'], ['run.uuid'], ),
    sa.PrimaryKeyConstraint('uuid')
    )
    # ### end Alembic commands ###


def downgrade() -> None:
    # ### commands auto generated by Alembic - please adjust! ###
    op.drop_table('taskresult')
    op.drop_index(op.f('ix_run_strategy'), table_name='run')
    op.drop_index(op.f('ix_run_config_hash'), table_name='run')
    op.drop_table('run')
    # ### end Alembic commands ###
